//! Acceptance suite. Each criterion prints one PASS/FAIL line and a summary
//! follows. Failures are reported, not fatal, so the remaining test targets of
//! a workspace run still execute; set `FDIA_ACCEPT_STRICT=1` to exit non-zero
//! on any failure.
//!
//! Set `FDIA_ACCEPT_ONLY=name1,name2` to run a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fdia_core::attack::{apply_attack, craft_fdia, AttackSpec};
use fdia_core::config::PipelineConfig;
use fdia_core::encoders::{gaf_encode, gaf_from_unit, gaf_product_form, rescale_unit, rp_encode, RpMode};
use fdia_core::estimation::{bdd_check, bdd_residual, bdd_threshold, dc_power_flow, residual, wls_estimate, MeasurementVector, StateVector};
use fdia_core::grid::{build_dc_model, GridCase, MeasurementModel};
use fdia_core::nn::{ClassifierModel, Control, LayerSpec, Pass, Tensor, TrainState};
use fdia_core::pipeline;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SIGMA: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Random operating point: nominal loads scaled per bus, then noisy meters.
fn noisy_point(case: &GridCase, model: &MeasurementModel, rng: &mut ChaCha8Rng) -> (StateVector, MeasurementVector) {
    let loads: Vec<f64> = case.nominal_loads_pu().iter().map(|l| l * rng.random_range(0.5..1.5)).collect();
    let (x, z) = dc_power_flow(case, &loads).unwrap();
    let noise = Normal::new(0.0, model.noise_sigma).unwrap();
    let z = MeasurementVector::new(z.values_pu.iter().map(|v| v + noise.sample(rng)).collect());
    (x, z)
}

fn stealth_invariance() -> Outcome {
    let case = GridCase::ieee57();
    let model = build_dc_model(&case, SIGMA).unwrap();
    let buses = case.state_buses();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (_, z) = noisy_point(&case, &model, &mut rng);
        let x_hat = wls_estimate(&model, &z).unwrap();
        let before = bdd_residual(&model, &z, &x_hat);
        let n_targets = rng.random_range(1..=3);
        let spec = AttackSpec {
            target_buses: buses.choose_multiple(&mut rng, n_targets).copied().collect(),
            scale: rng.random_range(0.5..1.5),
        };
        let za = apply_attack(&z, &craft_fdia(&model, &x_hat, &spec).unwrap());
        let after = bdd_residual(&model, &za, &wls_estimate(&model, &za).unwrap());
        worst = worst.max((after - before).abs());
    }
    outcome(worst <= 1e-8, format!("max |dr| = {worst:.3e} over 1000 attacks"))
}

/// Reactances jittered by up to 50% so each trial sees a different H.
fn jittered_case(rng: &mut ChaCha8Rng) -> GridCase {
    let mut case = GridCase::ieee57();
    for br in &mut case.branches {
        br.reactance_pu *= rng.random_range(0.5..1.5);
    }
    case
}

fn wls_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut recovery, mut ortho): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let case = jittered_case(&mut rng);
        let model = build_dc_model(&case, SIGMA).unwrap();
        let x: Vec<f64> = (0..model.num_states()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let z_clean = &model.h * nalgebra::DVector::from_vec(x.clone());
        let x_hat = wls_estimate(&model, &MeasurementVector::new(z_clean.as_slice().to_vec())).unwrap();
        for (a, b) in x.iter().zip(&x_hat.angles_rad) {
            recovery = recovery.max((a - b).abs());
        }

        let noise = Normal::new(0.0, SIGMA).unwrap();
        let z = MeasurementVector::new(z_clean.iter().map(|v| v + noise.sample(&mut rng)).collect());
        let est = wls_estimate(&model, &z).unwrap();
        let r = residual(&model, &z, &est);
        let weighted: Vec<f64> = r.iter().zip(&model.w_diag).map(|(ri, w)| ri / w).collect();
        let g = model.h.transpose() * nalgebra::DVector::from_vec(weighted);
        ortho = ortho.max(g.amax());
    }
    outcome(
        recovery <= 1e-9 && ortho <= 1e-8,
        format!("max |x - x_hat| = {recovery:.2e}, max |H^T W^-1 r| = {ortho:.2e}"),
    )
}

fn paper_dataset_shape() -> Outcome {
    let cfg = PipelineConfig::preset("paper", &[]).unwrap();
    let (_, ds) = pipeline::generate(&cfg).unwrap();
    let counts = ds.class_counts();
    let attacked_ok = counts[1..].iter().all(|&c| c == 576);
    let pass = ds.len() == 9533 && ds.num_features() == 136 && ds.num_classes() == 14 && counts[0] == 2045 && attacked_ok;
    outcome(
        pass,
        format!(
            "{} samples, {} features, {} classes, normal {}, attacked per class {:?}",
            ds.len(),
            ds.num_features(),
            ds.num_classes(),
            counts[0],
            &counts[1..]
        ),
    )
}

fn encoder_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut form_gap: f64 = 0.0;
    let mut invariants = true;
    for _ in 0..1000 {
        let len = rng.random_range(2..=64);
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let unit = rescale_unit(&v).unwrap();
        let (a, b) = (gaf_from_unit(&unit), gaf_product_form(&unit));
        for (p, q) in a.data.iter().zip(&b.data) {
            form_gap = form_gap.max((p - q).abs());
        }
        let rp = rp_encode(&v, 0.1, RpMode::Distance).unwrap();
        let rpb = rp_encode(&v, 0.1, RpMode::Binary).unwrap();
        for i in 0..len {
            for j in 0..len {
                invariants &= a.at(i, j) == a.at(j, i) && rp.at(i, j) == rp.at(j, i) && rpb.at(i, j) == rpb.at(j, i);
                invariants &= (-1.0 - 1e-12..=1.0 + 1e-12).contains(&a.at(i, j));
                invariants &= (-1e-12..=1.0 + 1e-12).contains(&rp.at(i, j));
                invariants &= rpb.at(i, j) == 0.0 || rpb.at(i, j) == 1.0;
            }
            invariants &= rp.at(i, i) == 1.0 && rpb.at(i, i) == 1.0;
        }
    }
    let close = |got: &[f64], want: [f64; 4]| got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-12);
    let gaf2 = gaf_encode(&[0.0, 1.0]).unwrap();
    let rp2 = rp_encode(&[0.0, 1.0], 0.1, RpMode::Distance).unwrap();
    let rp2b = rp_encode(&[0.0, 1.0], 0.1, RpMode::Binary).unwrap();
    let hand = close(&gaf2.data, [-1.0, 0.0, 0.0, 1.0]) && close(&rp2.data, [1.0, 0.0, 0.0, 1.0]) && close(&rp2b.data, [1.0, 0.0, 0.0, 1.0]);
    outcome(
        form_gap <= 1e-12 && invariants && hand,
        format!("GAF form gap {form_gap:.2e}, invariants {invariants}, 2-point matrices {hand}"),
    )
}

/// Relative error. Gradients that vanish analytically (a bias feeding a
/// training-mode batchnorm) leave only rounding noise of order 1e-11 in the
/// central difference, so magnitudes are floored at 1e-6.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic parameter and input gradients against central
/// differences. `train_seed` selects a training pass whose dropout masks are
/// re-drawn identically for every evaluation.
fn grad_check(input_shape: &[usize], specs: &[LayerSpec], batch: usize, train_seed: Option<u64>) -> f64 {
    const H: f64 = 1e-5;
    let mut model = ClassifierModel::new(input_shape.to_vec(), specs, 5).unwrap();
    let k = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // Non-trivial running statistics for the frozen batchnorm pass.
    for layer in model.layers_mut() {
        if let [mean, var] = layer.buffers.as_mut_slice() {
            mean.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            var.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
        for p in &mut layer.params {
            if p.shape().len() == 1 {
                p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(input_shape);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % k).collect();

    let eval = |m: &mut ClassifierModel, x: &Tensor, want_input: bool| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(train_seed.unwrap_or(0));
        let pass = match train_seed {
            Some(_) => Pass::Training(&mut drop_rng),
            None => Pass::Frozen,
        };
        let snapshot: Vec<Vec<Tensor>> = m.layers().iter().map(|l| l.buffers.clone()).collect();
        let b = m.backprop(x, &labels, pass, want_input).unwrap();
        for (l, buf) in m.layers_mut().iter_mut().zip(snapshot) {
            l.buffers = buf;
        }
        b
    };

    let analytic = eval(&mut model, &x, true);
    let mut worst: f64 = 0.0;
    for li in 0..model.layers().len() {
        for pi in 0..model.layers()[li].params.len() {
            for j in 0..model.layers()[li].params[pi].len() {
                let orig = model.layers()[li].params[pi].data()[j];
                model.layers_mut()[li].params[pi].data_mut()[j] = orig + H;
                let up = eval(&mut model, &x, false).loss;
                model.layers_mut()[li].params[pi].data_mut()[j] = orig - H;
                let down = eval(&mut model, &x, false).loss;
                model.layers_mut()[li].params[pi].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * H);
                worst = worst.max(rel_err(analytic.grads.per_layer[li][pi].data()[j], numeric));
            }
        }
    }
    let dx = analytic.input_grad.expect("input gradient requested");
    for j in 0..n {
        let mut xp = x.clone();
        xp.data_mut()[j] += H;
        let up = eval(&mut model, &xp, false).loss;
        xp.data_mut()[j] -= 2.0 * H;
        let down = eval(&mut model, &xp, false).loss;
        worst = worst.max(rel_err(dx.data()[j], (up - down) / (2.0 * H)));
    }
    worst
}

/// Name, input shape, layer stack, dropout seed for training mode.
type GradCase = (&'static str, Vec<usize>, Vec<LayerSpec>, Option<u64>);
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn gradient_checks() -> Outcome {
    let conv = LayerSpec::Conv2d { filters: 3, kernel: 3, stride: 1, padding: 1 };
    let strided = LayerSpec::Conv2d { filters: 2, kernel: 2, stride: 2, padding: 0 };
    let pool = LayerSpec::MaxPool { window: 2, stride: 2 };
    let dense = LayerSpec::Dense { units: 3 };
    let cases: Vec<GradCase> = vec![
        ("conv2d", vec![2, 5, 5], vec![conv, LayerSpec::Flatten, dense, LayerSpec::Softmax], None),
        ("conv2d strided", vec![1, 6, 6], vec![strided, LayerSpec::Flatten, dense, LayerSpec::Softmax], None),
        ("relu", vec![12], vec![LayerSpec::Dense { units: 6 }, LayerSpec::Relu, dense, LayerSpec::Softmax], None),
        ("batchnorm frozen", vec![2, 4, 4], vec![conv, LayerSpec::BatchNorm, LayerSpec::Flatten, dense, LayerSpec::Softmax], None),
        ("batchnorm training", vec![2, 4, 4], vec![conv, LayerSpec::BatchNorm, LayerSpec::Flatten, dense, LayerSpec::Softmax], Some(9)),
        ("batchnorm dense", vec![6], vec![LayerSpec::Dense { units: 5 }, LayerSpec::BatchNorm, dense, LayerSpec::Softmax], Some(9)),
        ("maxpool", vec![2, 6, 6], vec![conv, pool, LayerSpec::Flatten, dense, LayerSpec::Softmax], None),
        ("dropout", vec![10], vec![LayerSpec::Dropout { rate: 0.4 }, dense, LayerSpec::Softmax], Some(3)),
        ("flatten+dense", vec![2, 3, 3], vec![LayerSpec::Flatten, dense, LayerSpec::Softmax], None),
        ("softmax+ce", vec![5], vec![LayerSpec::Flatten, LayerSpec::Softmax], None),
    ];
    let mut worst: f64 = 0.0;
    let mut per = Vec::new();
    for (name, shape, specs, seed) in cases {
        let e = grad_check(&shape, &specs, 4, seed);
        per.push(format!("{name} {e:.1e}"));
        worst = worst.max(e);
    }
    outcome(worst <= 1e-4, format!("worst relative error {worst:.2e} ({})", per.join(", ")))
}

fn desk(overrides: &[String]) -> PipelineConfig {
    PipelineConfig::preset("desk", overrides).unwrap()
}

fn overfit_capacity() -> Outcome {
    let cfg = desk(&[]);
    let (_, ds) = pipeline::generate(&cfg).unwrap();
    let images = pipeline::encode_images(&ds, &pipeline::encode_params(&cfg)).unwrap();
    // Every class represented: stride through the label-sorted sample list.
    let step = ds.len() / 200;
    let idx: Vec<usize> = (0..200).map(|i| i * step).collect();
    let x = images.gather_rows(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.samples[i].label).collect();
    let model = pipeline::build_model(&cfg, &images.shape()[1..], ds.num_classes()).unwrap();
    let tc = fdia_core::nn::TrainConfig { epochs: 200, checkpoint_every: 0, ..cfg.train_config(None) };
    let mut state = TrainState::new(model, &tc);
    let accuracy = |m: &ClassifierModel| {
        let (pred, _) = m.predict(&x).unwrap();
        pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / 200.0
    };
    // The per-epoch train_acc is measured with dropout on and batch
    // statistics; stop on the stricter inference-mode accuracy instead.
    let history = fdia_core::nn::train(&mut state, &x, &labels, None, &tc, |s, _| {
        if accuracy(&s.model) >= 0.99 {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .unwrap();
    let acc = accuracy(&state.model);
    outcome(acc >= 0.99, format!("inference accuracy {acc:.3} after {} epochs", history.len()))
}

fn desk_end_to_end(dir: &Path) -> Outcome {
    let cfg = desk(&[format!("output.dir=\"{}\"", dir.display())]);
    let out = pipeline::run_pipeline(&cfg, &mut |_| {}).unwrap();
    let (f1, knn) = (out.model_report.macro_avg.f1, out.knn_report.macro_avg.f1);
    let files = ["dataset.fdia", "images.fdia", "model.fdnn", "comparison.csv", "confusion.pgm"];
    let artifacts = files.iter().all(|f| dir.join(f).exists());
    outcome(
        f1 >= 0.90 && f1 > knn && artifacts,
        format!("{} macro-F1 {f1:.4}, kNN macro-F1 {knn:.4}, artifacts present {artifacts}", out.approach),
    )
}

fn bdd_positive_control() -> Outcome {
    let case = GridCase::ieee57();
    let model = build_dc_model(&case, SIGMA).unwrap();
    let tau = bdd_threshold(&model, 0.01).unwrap();
    let buses = case.state_buses();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut flagged = 0;
    let mut missed_meters = Vec::new();
    let mut fdia_changed = 0;
    let mut fdia_flagged = 0;
    let mut base_flagged = 0;
    for _ in 0..100 {
        let (_, z) = noisy_point(&case, &model, &mut rng);
        let x_hat = wls_estimate(&model, &z).unwrap();
        let base = bdd_check(&model, &z, &x_hat, tau);
        base_flagged += usize::from(base.flagged);

        let meter = rng.random_range(0..model.num_meters());
        let mut bad = z.clone();
        bad.values_pu[meter] += 10.0 * SIGMA;
        let hit = bdd_check(&model, &bad, &wls_estimate(&model, &bad).unwrap(), tau).flagged;
        if hit {
            flagged += 1;
        } else {
            missed_meters.push(meter);
        }

        let spec = AttackSpec::single(*buses.choose(&mut rng).unwrap(), if rng.random_bool(0.5) { 0.9 } else { 1.1 });
        let za = apply_attack(&z, &craft_fdia(&model, &x_hat, &spec).unwrap());
        let atk = bdd_check(&model, &za, &wls_estimate(&model, &za).unwrap(), tau);
        fdia_flagged += usize::from(atk.flagged);
        fdia_changed += usize::from(atk.flagged != base.flagged);
    }
    missed_meters.sort_unstable();
    missed_meters.dedup();
    outcome(
        flagged >= 99 && fdia_changed == 0,
        format!(
            "gross errors flagged {flagged}/100 (missed meters {missed_meters:?}); FDIA flagged {fdia_flagged}/100, \
             noise-only baseline flagged {base_flagged}/100, FDIA changed the BDD decision {fdia_changed} times"
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn manifest_without_timings(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn determinism(dir: &Path) -> Outcome {
    // The desk preset with every output switched on, shortened so the
    // repeated runs stay cheap.
    let cfg = desk(&[
        format!("output.dir=\"{}\"", dir.display()),
        "train.epochs=3".into(),
        "train.checkpoint_every=1".into(),
    ]);
    pipeline::run_pipeline(&cfg, &mut |_| {}).unwrap();
    let (first, first_manifest) = (snapshot(dir), manifest_without_timings(dir));
    fs::remove_dir_all(dir).unwrap();
    pipeline::run_pipeline(&cfg, &mut |_| {}).unwrap();
    let (second, second_manifest) = (snapshot(dir), manifest_without_timings(dir));

    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let checkpoints = first.keys().filter(|k| k.starts_with("checkpoints")).count();
    outcome(
        differing.is_empty() && first_manifest == second_manifest && checkpoints == 3,
        format!(
            "{} files compared ({checkpoints} checkpoints), differing: {differing:?}, manifests equal {}",
            first.len(),
            first_manifest == second_manifest
        ),
    )
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("FDIA_ACCEPT_ONLY").ok().map(|s| s.split(',').map(str::to_owned).collect());
    let scratch = tempfile::tempdir().unwrap();
    let e2e_dir = scratch.path().join("desk");
    let det_dir = scratch.path().join("determinism");
    let criteria: Vec<Criterion> = vec![
        ("stealth_invariance", Box::new(stealth_invariance)),
        ("wls_oracle", Box::new(wls_oracle)),
        ("paper_dataset_shape", Box::new(paper_dataset_shape)),
        ("encoder_oracles", Box::new(encoder_oracles)),
        ("gradient_checks", Box::new(gradient_checks)),
        ("overfit_capacity", Box::new(overfit_capacity)),
        ("desk_end_to_end", Box::new(move || desk_end_to_end(&e2e_dir))),
        ("bdd_positive_control", Box::new(bdd_positive_control)),
        ("determinism", Box::new(move || determinism(&det_dir))),
    ];

    let mut failed = 0;
    for (name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        let start = Instant::now();
        let r = run();
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!r.pass);
        println!("{verdict} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), r.detail);
    }
    println!("{failed} acceptance criteria failed");
    if failed > 0 && std::env::var_os("FDIA_ACCEPT_STRICT").is_some_and(|v| v != "0") {
        std::process::exit(1);
    }
}
