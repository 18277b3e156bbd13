//! End-to-end run: case, profiles, dataset, images, training, evaluation.
//! Every stage is also callable on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{EncoderKind, NetworkPreset, PipelineConfig, ProfileSource};
use crate::dataset::{
    generate_dataset, import_profiles, split_indices, synth_profiles_steps, write_dataset, Dataset, GenerationConfig,
    LoadProfiles, Sample,
};
use crate::encoders::{encode_dataset, write_pgm, EncodeParams, Encoder};
use crate::error::{Error, Result};
use crate::estimation::{bdd_residual, bdd_threshold, MeasurementVector, StateVector};
use crate::evaluation::{compare_report, confusion, knn_classify, metrics, ConfusionMatrix, MetricsReport};
use crate::grid::{build_dc_model, parse_case, BusId, GridCase};
use crate::nn::{
    build_cnn, build_mlp_baseline, save_model, train, write_history_csv, ClassifierModel, CnnOptions, Control,
    EpochRecord, Tensor, TrainState,
};

pub fn load_case(cfg: &PipelineConfig) -> Result<GridCase> {
    if cfg.case.path.is_empty() {
        return Ok(GridCase::ieee57());
    }
    parse_case(&fs::read_to_string(&cfg.case.path)?)
}

pub fn load_profiles(cfg: &PipelineConfig, case: &GridCase) -> Result<LoadProfiles> {
    let p = &cfg.profiles;
    match p.source {
        ProfileSource::Synthetic => synth_profiles_steps(case, p.steps, p.step_minutes, p.seed),
        ProfileSource::Csv => {
            let mut profiles = import_profiles(&fs::read_to_string(&p.csv_path)?, case)?;
            profiles.step_minutes = p.step_minutes;
            Ok(profiles)
        }
    }
}

pub fn generation_config(cfg: &PipelineConfig) -> GenerationConfig {
    let a = &cfg.attack;
    GenerationConfig {
        targets: a.targets.iter().map(|&b| BusId(b)).collect(),
        scales: a.scales.clone(),
        noise_sigma: a.noise_sigma,
        attack_window: a.window_start..a.window_end,
        seed: a.seed,
    }
}

pub fn generate(cfg: &PipelineConfig) -> Result<(GridCase, Dataset)> {
    let case = load_case(cfg)?;
    let profiles = load_profiles(cfg, &case)?;
    let ds = generate_dataset(&case, &profiles, &generation_config(cfg))?;
    Ok((case, ds))
}

pub fn encode_params(cfg: &PipelineConfig) -> EncodeParams {
    let e = &cfg.encoder;
    let encoder = match e.kind {
        EncoderKind::Gaf => Encoder::Gaf,
        EncoderKind::Rp => Encoder::Rp { epsilon_frac: e.epsilon_frac, mode: e.rp_mode },
    };
    EncodeParams { encoder, image_size: (e.image_size > 0).then_some(e.image_size) }
}

/// Encodes every sample; returns a `n x 1 x h x w` tensor.
pub fn encode_images(ds: &Dataset, params: &EncodeParams) -> Result<Tensor> {
    let images = encode_dataset(ds, params)?;
    let Some((first, _)) = images.first() else {
        return Err(Error::input("cannot encode an empty dataset"));
    };
    let (h, w) = (first.height, first.width);
    let n = images.len();
    Tensor::new(vec![n, 1, h, w], images.into_iter().flat_map(|(img, _)| img.data).collect())
}

/// Wraps encoded images in a dataset so they can be written to disk.
pub fn image_dataset(ds: &Dataset, images: &Tensor) -> Dataset {
    let per = images.len() / images.shape()[0];
    Dataset {
        samples: ds
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| Sample { features: images.row(i).to_vec(), label: s.label, timestep: s.timestep })
            .collect(),
        class_names: ds.class_names.clone(),
        feature_names: (0..per).map(|i| format!("px{i}")).collect(),
        seed: ds.seed,
    }
}

/// Model inputs for the configured network: images for the CNNs, raw
/// features for the MLP.
pub fn dataset_tensor(ds: &Dataset, image_shape: Option<[usize; 3]>) -> Result<Tensor> {
    let mut shape = vec![ds.len()];
    match image_shape {
        Some(s) => shape.extend(s),
        None => shape.push(ds.num_features()),
    }
    Tensor::new(shape, ds.samples.iter().flat_map(|s| s.features.iter().copied()).collect())
}

pub fn uses_images(cfg: &PipelineConfig) -> bool {
    cfg.network.preset != NetworkPreset::Mlp
}

pub fn build_model(cfg: &PipelineConfig, input_shape: &[usize], num_classes: usize) -> Result<ClassifierModel> {
    let n = &cfg.network;
    match (n.preset, input_shape) {
        (NetworkPreset::Mlp, &[len]) => build_mlp_baseline(len, &n.mlp_hidden, num_classes, n.seed),
        (NetworkPreset::PaperCnn | NetworkPreset::DeskCnn, &[channels, h, w]) if h == w => build_cnn(&CnnOptions {
            input_hw: h,
            channels,
            num_classes,
            dense_units: n.dense_units,
            batchnorm: n.batchnorm,
            dropout: n.dropout,
            seed: n.seed,
        }),
        (preset, shape) => Err(Error::Config(format!("network {preset:?} cannot take inputs of shape {shape:?}"))),
    }
}

pub fn split(cfg: &PipelineConfig, ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    split_indices(&ds.labels(), ds.num_classes(), cfg.split.train_fraction, cfg.split.seed)
}

pub fn approach_name(cfg: &PipelineConfig) -> String {
    match (cfg.network.preset, cfg.encoder.kind) {
        (NetworkPreset::Mlp, _) => "mlp".into(),
        (_, EncoderKind::Rp) => "rp_cnn".into(),
        (_, EncoderKind::Gaf) => "gaf_cnn".into(),
    }
}

/// Share of normal and of attacked samples whose residual exceeds the
/// chi-square threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BddRates {
    pub threshold: f64,
    pub normal_alarm_rate: f64,
    pub attacked_alarm_rate: f64,
}

pub fn bdd_rates(cfg: &PipelineConfig, case: &GridCase, ds: &Dataset) -> Result<BddRates> {
    let model = build_dc_model(case, cfg.attack.noise_sigma)?;
    let tau = bdd_threshold(&model, cfg.bdd.alpha)?;
    let m = model.num_meters();
    let (mut alarms, mut counts) = ([0usize; 2], [0usize; 2]);
    for s in &ds.samples {
        let z = MeasurementVector::new(s.features[..m].to_vec());
        let x = StateVector::new(s.features[m..].to_vec());
        let r = bdd_residual(&model, &z, &x);
        let k = usize::from(s.label != 0);
        counts[k] += 1;
        alarms[k] += usize::from(r > tau);
    }
    let rate = |k: usize| if counts[k] == 0 { 0.0 } else { alarms[k] as f64 / counts[k] as f64 };
    Ok(BddRates { threshold: tau, normal_alarm_rate: rate(0), attacked_alarm_rate: rate(1) })
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock times; the only non-reproducible part of a run.
    pub timings: Vec<StageTiming>,
}

#[derive(Debug, Clone, Serialize)]
struct ClassRow {
    class: String,
    precision: f64,
    recall: f64,
    f1: f64,
    support: u64,
}

#[derive(Debug, Clone, Serialize)]
struct ApproachMetrics {
    approach: String,
    accuracy: f64,
    macro_precision: f64,
    macro_recall: f64,
    macro_f1: f64,
    per_class: Vec<ClassRow>,
}

impl ApproachMetrics {
    fn new(name: &str, r: &MetricsReport, classes: &[String]) -> Self {
        Self {
            approach: name.into(),
            accuracy: r.accuracy,
            macro_precision: r.macro_avg.precision,
            macro_recall: r.macro_avg.recall,
            macro_f1: r.macro_avg.f1,
            per_class: r
                .per_class
                .iter()
                .zip(classes)
                .zip(&r.support)
                .map(|((m, c), &support)| ClassRow { class: c.clone(), precision: m.precision, recall: m.recall, f1: m.f1, support })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct MetricsFile {
    n_train: usize,
    n_test: usize,
    bdd: BddRates,
    approaches: Vec<ApproachMetrics>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub approach: String,
    pub model_report: MetricsReport,
    pub knn_report: MetricsReport,
    pub model_confusion: ConfusionMatrix,
    pub history: Vec<EpochRecord>,
    pub bdd: BddRates,
    pub manifest: RunManifest,
}

struct Stages {
    timings: Vec<StageTiming>,
    clock: Instant,
}

impl Stages {
    fn done(&mut self, stage: &str, log: &mut dyn FnMut(&str)) {
        let seconds = self.clock.elapsed().as_secs_f64();
        log(&format!("{stage}: {seconds:.1}s"));
        self.timings.push(StageTiming { stage: stage.into(), seconds });
        self.clock = Instant::now();
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_predictions(path: &Path, test_idx: &[usize], truth: &[usize], model: &[usize], knn: &[usize]) -> Result<()> {
    let mut out = String::from("sample,true,model,knn\n");
    for (((i, t), m), k) in test_idx.iter().zip(truth).zip(model).zip(knn) {
        writeln!(out, "{i},{t},{m},{k}").expect("write to string");
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct Evaluation {
    pub approach: String,
    pub model_report: MetricsReport,
    pub knn_report: MetricsReport,
    pub model_confusion: ConfusionMatrix,
}

/// Scores `model` on the test indices against a k-NN baseline on the raw
/// features, and writes confusion matrices, predictions, the comparison
/// table and `metrics.json` into `out`.
pub fn evaluate(
    cfg: &PipelineConfig,
    raw: &Dataset,
    inputs: &Tensor,
    model: &ClassifierModel,
    (train_idx, test_idx): (&[usize], &[usize]),
    out: &Path,
) -> Result<Evaluation> {
    if inputs.shape()[0] != raw.len() {
        return Err(Error::Shape(format!("{} model inputs for {} samples", inputs.shape()[0], raw.len())));
    }
    let k = raw.num_classes();
    let labels = raw.labels();
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    let (pred, _) = model.predict(&inputs.gather_rows(test_idx))?;
    let cm = confusion(&y_test, &pred, k)?;
    let report = metrics(&cm);
    let rows = raw.features();
    let train_rows: Vec<&[f64]> = train_idx.iter().map(|&i| rows[i]).collect();
    let test_rows: Vec<&[f64]> = test_idx.iter().map(|&i| rows[i]).collect();
    let knn_pred = knn_classify(&train_rows, &y_train, &test_rows, cfg.baseline.knn_k)?;
    let knn_cm = confusion(&y_test, &knn_pred, k)?;
    let knn_report = metrics(&knn_cm);
    let approach = approach_name(cfg);

    fs::create_dir_all(out)?;
    fs::write(out.join("confusion.csv"), cm.to_csv(&raw.class_names))?;
    fs::write(out.join("confusion.pgm"), cm.to_pgm(16))?;
    fs::write(out.join("knn_confusion.csv"), knn_cm.to_csv(&raw.class_names))?;
    write_predictions(&out.join("predictions.csv"), test_idx, &y_test, &pred, &knn_pred)?;
    let reports = vec![(approach.clone(), report.clone()), ("knn".to_string(), knn_report.clone())];
    compare_report(&reports, &raw.class_names, &out.join("comparison.csv"))?;
    let case = load_case(cfg)?;
    let mf = MetricsFile {
        n_train: y_train.len(),
        n_test: y_test.len(),
        bdd: bdd_rates(cfg, &case, raw)?,
        approaches: reports.iter().map(|(n, r)| ApproachMetrics::new(n, r, &raw.class_names)).collect(),
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&mf)? + "\n")?;
    Ok(Evaluation { approach, model_report: report, knn_report, model_confusion: cm })
}

/// Runs every stage and writes all artifacts into the configured output
/// directory. Progress lines go to `log`.
pub fn run_pipeline(cfg: &PipelineConfig, log: &mut dyn FnMut(&str)) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;
    let hash = cfg.hash();
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let mut st = Stages { timings: Vec::new(), clock: Instant::now() };

    let (case, ds) = generate(cfg)?;
    write_dataset(&ds, &out.join("dataset.fdia"), &hash, None)?;
    log(&format!("dataset: {} samples, {} features, {} classes", ds.len(), ds.num_features(), ds.num_classes()));
    st.done("generate", log);

    let bdd = bdd_rates(cfg, &case, &ds)?;
    log(&format!(
        "bdd: threshold {:.4}, alarms on {:.2}% of normal and {:.2}% of attacked samples",
        bdd.threshold,
        100.0 * bdd.normal_alarm_rate,
        100.0 * bdd.attacked_alarm_rate
    ));
    let (train_idx, test_idx) = split(cfg, &ds)?;

    let inputs = if uses_images(cfg) {
        let params = encode_params(cfg);
        let images = encode_images(&ds, &params)?;
        let shape = [1, images.shape()[2], images.shape()[3]];
        write_dataset(&image_dataset(&ds, &images), &out.join("images.fdia"), &hash, Some(shape))?;
        let pgm_dir = out.join("images");
        fs::create_dir_all(&pgm_dir)?;
        let (lo, hi) = params.encoder.value_range();
        let mut written = vec![0usize; ds.num_classes()];
        for (i, s) in ds.samples.iter().enumerate() {
            if written[s.label] < cfg.encoder.pgm_per_class {
                let img = crate::encoders::ImageTensor::square(shape[1], images.row(i).to_vec());
                write_pgm(&pgm_dir.join(format!("{}_{}.pgm", ds.class_names[s.label], written[s.label])), &img, lo, hi)?;
                written[s.label] += 1;
            }
        }
        st.done("encode", log);
        images
    } else {
        dataset_tensor(&ds, None)?
    };

    let input_shape = inputs.shape()[1..].to_vec();
    let model = build_model(cfg, &input_shape, ds.num_classes())?;
    let x_train = inputs.gather_rows(&train_idx);
    let x_test = inputs.gather_rows(&test_idx);
    let labels = ds.labels();
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    let ckpt_dir = (cfg.train.checkpoint_every > 0).then(|| out.join("checkpoints"));
    let tc = cfg.train_config(ckpt_dir);
    let mut state = TrainState::new(model, &tc);
    log(&format!("training {} parameters on {} samples", state.model.num_params(), y_train.len()));
    let history = train(&mut state, &x_train, &y_train, Some((&x_test, &y_test)), &tc, |_, r| {
        log(&format!(
            "epoch {:>3}: loss {:.4}, train acc {:.3}, test acc {:.3}",
            r.epoch,
            r.loss,
            r.train_acc,
            r.val_acc.unwrap_or(0.0)
        ));
        Control::Continue
    })?;
    save_model(&state.model, &out.join("model.fdnn"))?;
    write_history_csv(&history, &out.join("history.csv"))?;
    st.done("train", log);

    let ev = evaluate(cfg, &ds, &inputs, &state.model, (&train_idx, &test_idx), &out)?;
    let (report, knn_report, cm, approach) = (ev.model_report, ev.knn_report, ev.model_confusion, ev.approach);
    log(&format!("{approach} macro F1 {:.4}, knn macro F1 {:.4}", report.macro_avg.f1, knn_report.macro_avg.f1));
    st.done("evaluate", log);

    let mut artifacts = BTreeMap::new();
    let mut files: Vec<PathBuf> = Vec::new();
    collect_files(&out, &mut files)?;
    for f in files {
        let rel = f.strip_prefix(&out).expect("inside output dir").to_string_lossy().replace('\\', "/");
        if rel != "manifest.json" {
            artifacts.insert(rel, sha256_file(&f)?);
        }
    }
    let manifest = RunManifest {
        tool: "fdia".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash,
        artifacts,
        timings: st.timings,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    Ok(PipelineOutcome {
        out_dir: out,
        approach,
        model_report: report,
        knn_report,
        model_confusion: cm,
        history,
        bdd,
        manifest,
    })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
