//! Labelled normal/attacked samples built from load profiles.

mod container;
mod profiles;

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

pub use container::{manifest_path, read_dataset, write_dataset, DatasetManifest, DATASET_MAGIC, DATASET_VERSION};
pub use profiles::{
    import_profiles, steps_per_day, synth_profiles, synth_profiles_steps, LoadProfiles, DEFAULT_STEP_MINUTES,
};

use crate::attack::{apply_attack, craft_fdia, AttackSpec};
use crate::error::{Error, Result};
use crate::estimation::{DcPowerFlow, MeasurementVector, WlsEstimator};
use crate::grid::{build_dc_model, BusId, GridCase, MeasurementModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.with_samples(Vec::new())
        }
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            samples,
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
            seed: self.seed,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        let f = self.num_features();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= k {
                return Err(Error::input(format!("sample {i}: label {} >= {k} classes", s.label)));
            }
            if s.features.len() != f {
                return Err(Error::Shape(format!("sample {i}: {} features, expected {f}", s.features.len())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    /// Attacked buses; class id k + 1 belongs to `targets[k]`.
    pub targets: Vec<BusId>,
    pub scales: Vec<f64>,
    pub noise_sigma: f64,
    pub attack_window: Range<usize>,
    pub seed: u64,
}

pub fn feature_names(case: &GridCase, model: &MeasurementModel) -> Vec<String> {
    let flows = model.meter_index.iter().map(|&i| {
        let br = &case.branches[i];
        format!("p_{}_{}", br.from_bus, br.to_bus)
    });
    let angles = model.state_index.iter().map(|b| format!("theta_{b}"));
    flows.chain(angles).collect()
}

pub fn class_names(targets: &[BusId]) -> Vec<String> {
    std::iter::once("normal".to_string())
        .chain(targets.iter().map(|b| format!("bus_{b}")))
        .collect()
}

/// Simulates every profile step: one noisy normal sample per step, plus one
/// attacked sample per (target, scale) for steps inside the attack window.
/// Each step draws its noise from its own RNG stream, so the output does not
/// depend on evaluation order.
pub fn generate_dataset(case: &GridCase, profiles: &LoadProfiles, cfg: &GenerationConfig) -> Result<Dataset> {
    let steps = profiles.len();
    if steps == 0 {
        return Err(Error::input("load profiles are empty"));
    }
    let model = build_dc_model(case, cfg.noise_sigma)?;
    if cfg.targets.is_empty() {
        return Err(Error::input("no attack targets"));
    }
    let mut seen = HashSet::new();
    for &bus in &cfg.targets {
        if bus == model.slack {
            return Err(Error::InvalidAttack(format!("target bus {bus} is the slack bus")));
        }
        if model.state_position(bus).is_none() {
            return Err(Error::InvalidAttack(format!("target bus {bus} is not in the case")));
        }
        if !seen.insert(bus) {
            return Err(Error::InvalidAttack(format!("target bus {bus} listed twice")));
        }
    }
    if cfg.scales.is_empty() {
        return Err(Error::input("no attack scales"));
    }
    if cfg.attack_window.start > cfg.attack_window.end || cfg.attack_window.end > steps {
        return Err(Error::input(format!(
            "attack window {:?} outside [0, {steps})",
            cfg.attack_window
        )));
    }

    let flow = DcPowerFlow::new(case)?;
    let estimator = WlsEstimator::new(&model)?;
    let features = |z: &MeasurementVector| -> Result<Vec<f64>> {
        let x = estimator.estimate(z)?;
        Ok(z.values_pu.iter().chain(&x.angles_rad).copied().collect())
    };

    let per_step: Vec<Vec<Sample>> = (0..steps)
        .into_par_iter()
        .map(|t| -> Result<Vec<Sample>> {
            let (_, clean) = flow.solve(&profiles.loads_pu(case, t))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            let z = MeasurementVector::new(
                clean
                    .values_pu
                    .iter()
                    .map(|v| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        v + cfg.noise_sigma * e
                    })
                    .collect(),
            );
            let x_hat = estimator.estimate(&z)?;
            let normal = z.values_pu.iter().chain(&x_hat.angles_rad).copied().collect();
            let mut out = vec![Sample { features: normal, label: 0, timestep: t }];
            if cfg.attack_window.contains(&t) {
                for (k, &bus) in cfg.targets.iter().enumerate() {
                    for &scale in &cfg.scales {
                        let atk = craft_fdia(&model, &x_hat, &AttackSpec::single(bus, scale))
                            .map_err(|e| Error::InvalidAttack(format!("timestep {t}, target bus {bus}: {e}")))?;
                        let za = apply_attack(&z, &atk);
                        out.push(Sample { features: features(&za)?, label: k + 1, timestep: t });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(Dataset {
        samples: per_step.into_iter().flatten().collect(),
        class_names: class_names(&cfg.targets),
        feature_names: feature_names(case, &model),
        seed: cfg.seed,
    })
}

/// Stratified random split. Each class contributes `round(fraction * count)`
/// samples to the training side, clamped so both sides get at least one.
/// Both halves keep the original sample order.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(&ds.labels(), ds.num_classes(), train_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub fn split_indices(labels: &[usize], num_classes: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::input(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::input(format!("label {l} out of range")));
        }
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::input(format!("class {class} has fewer than 2 samples")));
        }
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
