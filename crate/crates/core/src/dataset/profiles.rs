use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{BusId, GridCase};

pub const DEFAULT_STEP_MINUTES: u32 = 5;

/// Per-bus load time series in MW. Buses without a series keep their nominal
/// case load at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfiles {
    pub step_minutes: u32,
    pub series: BTreeMap<BusId, Vec<f64>>,
}

impl LoadProfiles {
    pub fn len(&self) -> usize {
        self.series.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-unit loads for every bus of `case` at step `t`, in case bus order.
    pub fn loads_pu(&self, case: &GridCase, t: usize) -> Vec<f64> {
        case.buses
            .iter()
            .map(|b| self.series.get(&b.id).map_or(b.load_mw, |s| s[t]) / case.base_mva)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(Error::input("load profiles are empty"));
        }
        for (bus, s) in &self.series {
            if s.len() != t {
                return Err(Error::input(format!("profile for bus {bus} has {} steps, expected {t}", s.len())));
            }
            if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::input(format!("profile for bus {bus} has negative or non-finite load")));
            }
        }
        Ok(())
    }
}

fn load_buses(case: &GridCase) -> Vec<(BusId, f64)> {
    case.buses.iter().filter(|b| b.load_mw > 0.0).map(|b| (b.id, b.load_mw)).collect()
}

/// Reads a CSV of MW profiles (one column per profile) and spreads them over
/// the case's load buses round-robin, each rescaled so its time average is
/// the bus's nominal load.
pub fn import_profiles(csv_text: &str, case: &GridCase) -> Result<LoadProfiles> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let width = reader.headers()?.len();
    if width == 0 || csv_text.trim().is_empty() {
        return Err(Error::input("empty profiles file"));
    }
    let mut columns = vec![Vec::new(); width];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::input(format!("ragged row {} in profiles CSV", row + 2)),
            _ => Error::from(e),
        })?;
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::input(format!("row {}: '{field}' is not a number", row + 2)))?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::input(format!("row {}: negative or non-finite load {v}", row + 2)));
            }
            columns[col].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::input("profiles CSV has no data rows"));
    }
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    if let Some(k) = means.iter().position(|m| *m <= 0.0) {
        return Err(Error::input(format!("profile {} has zero mean and cannot be rescaled", k + 1)));
    }

    let series = load_buses(case)
        .into_iter()
        .enumerate()
        .map(|(i, (bus, nominal))| {
            let k = i % width;
            let scale = nominal / means[k];
            (bus, columns[k].iter().map(|v| v * scale).collect())
        })
        .collect();
    let profiles = LoadProfiles { step_minutes: DEFAULT_STEP_MINUTES, series };
    profiles.validate()?;
    Ok(profiles)
}

pub fn steps_per_day(step_minutes: u32) -> usize {
    (24 * 60 / step_minutes.max(1)) as usize
}

/// Synthetic load profiles covering `days` whole days.
pub fn synth_profiles(case: &GridCase, days: usize, step_minutes: u32, seed: u64) -> Result<LoadProfiles> {
    if days == 0 {
        return Err(Error::input("days must be at least 1"));
    }
    synth_profiles_steps(case, days * steps_per_day(step_minutes), step_minutes, seed)
}

/// Synthetic load profiles of exactly `steps` samples. Each load bus follows
/// a daily double-peak curve with its own phase and amplitudes plus AR(1)
/// noise, clamped to [0.3, 1.7] x nominal. Every bus draws from its own
/// stream, so a longer run extends a shorter one without changing it.
pub fn synth_profiles_steps(case: &GridCase, steps: usize, step_minutes: u32, seed: u64) -> Result<LoadProfiles> {
    if steps == 0 || step_minutes == 0 || step_minutes > 24 * 60 {
        return Err(Error::input("steps and step_minutes must be positive (step at most a day)"));
    }
    let mut series = BTreeMap::new();
    for (bus, nominal) in load_buses(case) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(bus.0));
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let phase_h = 0.5 * normal();
        let a1 = 0.2 * (1.0 + 0.2 * normal()).max(0.2);
        let a2 = 0.12 * (1.0 + 0.2 * normal()).max(0.2);
        let mut ar = 0.0;
        let s: Vec<f64> = (0..steps)
            .map(|t| {
                let h = t as f64 * step_minutes as f64 / 60.0;
                let shape = 1.0
                    + a1 * (2.0 * PI * (h - phase_h - 9.0) / 24.0).sin()
                    + a2 * (4.0 * PI * (h - phase_h - 3.0) / 24.0).sin();
                if t > 0 {
                    ar = 0.95 * ar + 0.01 * normal();
                }
                nominal * (shape * (1.0 + ar)).clamp(0.3, 1.7)
            })
            .collect();
        series.insert(bus, s);
    }
    Ok(LoadProfiles { step_minutes, series })
}
