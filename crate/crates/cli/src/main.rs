use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdia_core::attack::stealth_demo;
use fdia_core::config::PipelineConfig;
use fdia_core::dataset::{read_dataset, write_dataset};
use fdia_core::encoders::{downsample_area, gaf_encode, rp_encode, write_pgm, ImageTensor, RpMode};
use fdia_core::evaluation::ConfusionMatrix;
use fdia_core::grid::{parse_case, BusId, GridCase};
use fdia_core::nn::{load_checkpoint, load_model, save_model, train, write_history_csv, Control, TrainState};
use fdia_core::pipeline::{self, build_model, dataset_tensor, encode_images, encode_params, image_dataset};
use fdia_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fdia", version, about = "Stealthy FDIA simulation, image encoding and CNN localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset name (`paper`, `desk`) or path to a config file.
    #[arg(long, short, default_value = "desk")]
    config: String,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        PipelineConfig::resolve(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a MATPOWER case file and print its size.
    ParseCase { path: PathBuf },
    /// Simulate normal and attacked samples and write the dataset container.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode a dataset into images (GAF or RP per the config).
    Encode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured network on the training split of an input container.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Image container for the CNNs, raw dataset for the MLP.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written during an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trained model and the k-NN baseline on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model inputs (images or raw dataset).
        #[arg(long)]
        input: PathBuf,
        /// Raw dataset, used for the k-NN baseline.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Show that a crafted attack leaves the bad-data residual unchanged.
    AttackDemo {
        /// Case file; the bundled IEEE 57-bus case when omitted.
        #[arg(long)]
        case: Option<PathBuf>,
        #[arg(long, default_value_t = 25)]
        target: u32,
        #[arg(long, default_value_t = 1.1)]
        scale: f64,
        #[arg(long, default_value_t = 0.02)]
        sigma: f64,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a PGM image of one encoded sample or of a confusion matrix CSV.
    Render {
        /// Dataset container holding the sample.
        #[arg(long, conflicts_with = "confusion", required_unless_present = "confusion")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "rp", value_parser = ["gaf", "rp", "rp-binary"])]
        encoder: String,
        /// Downsample to this side length.
        #[arg(long)]
        size: Option<usize>,
        /// Confusion matrix CSV as written by `eval`.
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write all artifacts to the output directory.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn out_path(cfg: &PipelineConfig, explicit: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let path = explicit.unwrap_or_else(|| cfg.output_dir().join(name));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn load_case(path: Option<&Path>) -> Result<GridCase> {
    match path {
        Some(p) => parse_case(&fs::read_to_string(p)?),
        None => Ok(GridCase::ieee57()),
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::ParseCase { path } => {
            println!("{}", load_case(Some(&path))?.summary());
        }
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let (_, ds) = pipeline::generate(&cfg)?;
            let path = out_path(&cfg, out, "dataset.fdia")?;
            write_dataset(&ds, &path, &cfg.hash(), None)?;
            println!("wrote {} samples x {} features ({} classes) to {}", ds.len(), ds.num_features(), ds.num_classes(), path.display());
        }
        Command::Encode { cfg, input, out } => {
            let cfg = cfg.load()?;
            let (ds, _) = read_dataset(&input)?;
            let images = encode_images(&ds, &encode_params(&cfg))?;
            let shape = [1, images.shape()[2], images.shape()[3]];
            let path = out_path(&cfg, out, "images.fdia")?;
            write_dataset(&image_dataset(&ds, &images), &path, &cfg.hash(), Some(shape))?;
            println!("wrote {} images of {}x{} to {}", ds.len(), shape[1], shape[2], path.display());
        }
        Command::Train { cfg, input, out, resume } => {
            let cfg = cfg.load()?;
            let (ds, manifest) = read_dataset(&input)?;
            let inputs = dataset_tensor(&ds, manifest.image_shape)?;
            let (train_idx, _) = pipeline::split(&cfg, &ds)?;
            let x = inputs.gather_rows(&train_idx);
            let labels = ds.labels();
            let y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
            let path = out_path(&cfg, out, "model.fdnn")?;
            let ckpt = (cfg.train.checkpoint_every > 0).then(|| path.with_extension("checkpoints"));
            let tc = cfg.train_config(ckpt);
            let mut state = match resume {
                Some(p) => load_checkpoint(&p)?,
                None => TrainState::new(build_model(&cfg, &inputs.shape()[1..], ds.num_classes())?, &tc),
            };
            let history = train(&mut state, &x, &y, None, &tc, |_, r| {
                eprintln!("epoch {:>3}: loss {:.4}, train acc {:.3}", r.epoch, r.loss, r.train_acc);
                Control::Continue
            })?;
            save_model(&state.model, &path)?;
            write_history_csv(&history, &path.with_extension("history.csv"))?;
            println!("wrote {}", path.display());
        }
        Command::Eval { cfg, input, dataset, model, out_dir } => {
            let cfg = cfg.load()?;
            let (raw, _) = read_dataset(&dataset)?;
            let (inputs_ds, manifest) = read_dataset(&input)?;
            if inputs_ds.labels() != raw.labels() {
                return Err(Error::input("model inputs and raw dataset hold different samples"));
            }
            let inputs = dataset_tensor(&inputs_ds, manifest.image_shape)?;
            let model = load_model(&model)?;
            let (train_idx, test_idx) = pipeline::split(&cfg, &raw)?;
            let out = out_dir.unwrap_or_else(|| cfg.output_dir());
            let ev = pipeline::evaluate(&cfg, &raw, &inputs, &model, (&train_idx, &test_idx), &out)?;
            println!("{} macro precision {:.4} recall {:.4} F1 {:.4}", ev.approach, ev.model_report.macro_avg.precision, ev.model_report.macro_avg.recall, ev.model_report.macro_avg.f1);
            println!("knn macro precision {:.4} recall {:.4} F1 {:.4}", ev.knn_report.macro_avg.precision, ev.knn_report.macro_avg.recall, ev.knn_report.macro_avg.f1);
        }
        Command::AttackDemo { case, target, scale, sigma, alpha, seed } => {
            let case = load_case(case.as_deref())?;
            let d = stealth_demo(&case, BusId(target), scale, sigma, alpha, seed)?;
            println!("target bus {}, scale {}", d.target, d.scale);
            println!("estimated angle: {:.6} rad -> {:.6} rad", d.angle_before, d.angle_after);
            println!("largest meter injection: {:.6} pu", d.max_injection);
            println!("residual before: {:.12}", d.residual_before);
            println!("residual after:  {:.12}", d.residual_after);
            println!("residual delta:  {:.3e}", d.residual_delta());
            println!("BDD threshold:   {:.6}", d.threshold);
            let stealthy = d.residual_delta() < 1e-8;
            println!("{}", if stealthy { "attack is invisible to the residual test" } else { "residual changed: attack is NOT stealthy" });
            if !stealthy {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Render { input, index, encoder, size, confusion, out } => {
            if let Some(csv) = confusion {
                let cm = read_confusion_csv(&fs::read_to_string(csv)?)?;
                fs::write(&out, cm.to_pgm(16))?;
            } else {
                let (ds, _) = read_dataset(input.as_deref().expect("clap requires input"))?;
                let s = ds
                    .samples
                    .get(index)
                    .ok_or_else(|| Error::input(format!("index {index} out of range ({} samples)", ds.len())))?;
                let (img, lo, hi) = match encoder.as_str() {
                    "gaf" => (gaf_encode(&s.features)?, -1.0, 1.0),
                    "rp-binary" => (rp_encode(&s.features, 0.1, RpMode::Binary)?, 0.0, 1.0),
                    _ => (rp_encode(&s.features, 0.1, RpMode::Distance)?, 0.0, 1.0),
                };
                let img: ImageTensor = match size {
                    Some(n) => downsample_area(&img, n)?,
                    None => img,
                };
                write_pgm(&out, &img, lo, hi)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Pipeline { cfg: args, out } => {
            let mut overrides = args.overrides.clone();
            if let Some(dir) = out {
                overrides.push(format!("output.dir=\"{}\"", dir.display()));
            }
            let cfg = PipelineConfig::resolve(&args.config, &overrides)?;
            let outcome = pipeline::run_pipeline(&cfg, &mut |line| eprintln!("{line}"))?;
            println!(
                "{}: macro F1 {:.4} (knn {:.4}); artifacts in {}",
                outcome.approach,
                outcome.model_report.macro_avg.f1,
                outcome.knn_report.macro_avg.f1,
                outcome.out_dir.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_confusion_csv(text: &str) -> Result<ConfusionMatrix> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<u64> = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse().map_err(|_| Error::input(format!("line {}: bad count '{v}'", n + 1))))
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::input("confusion CSV must be a square table with a header row"));
    }
    Ok(ConfusionMatrix { k, counts: rows })
}
