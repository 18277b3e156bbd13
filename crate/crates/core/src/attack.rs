//! Stealthy false-data injection: `a = H c` shifts the estimate by `c` and
//! leaves the residual untouched.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimation::{bdd_residual, bdd_threshold, dc_power_flow, MeasurementVector, StateVector, WlsEstimator};
use crate::grid::{build_dc_model, BusId, GridCase, MeasurementModel};

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub target_buses: BTreeSet<BusId>,
    /// Multiplier on the targeted estimated angles, e.g. 0.9 or 1.1.
    pub scale: f64,
}

impl AttackSpec {
    pub fn single(bus: BusId, scale: f64) -> Self {
        Self { target_buses: BTreeSet::from([bus]), scale }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackVector {
    /// Injected measurement bias, per unit.
    pub a: Vec<f64>,
    /// Induced state bias, radians.
    pub c: Vec<f64>,
    pub label: usize,
}

/// Builds the attack that scales each targeted state of `x_hat` by
/// `spec.scale`. The label is left at 0; callers assign class ids.
pub fn craft_fdia(model: &MeasurementModel, x_hat: &StateVector, spec: &AttackSpec) -> Result<AttackVector> {
    if spec.target_buses.is_empty() {
        return Err(Error::InvalidAttack("no target buses".into()));
    }
    if !(spec.scale.is_finite() && spec.scale > 0.0) || spec.scale == 1.0 {
        return Err(Error::InvalidAttack(format!("scale must be positive and not 1, got {}", spec.scale)));
    }
    if x_hat.len() != model.num_states() {
        return Err(Error::Shape(format!("state length {} != {}", x_hat.len(), model.num_states())));
    }
    if x_hat.angles_rad.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite state estimate"));
    }

    let mut c = vec![0.0; model.num_states()];
    for &bus in &spec.target_buses {
        if bus == model.slack {
            return Err(Error::InvalidAttack(format!("bus {bus} is the slack bus")));
        }
        let j = model
            .state_position(bus)
            .ok_or_else(|| Error::InvalidAttack(format!("bus {bus} is not a state bus")))?;
        if x_hat.angles_rad[j] == 0.0 {
            return Err(Error::InvalidAttack(format!("bus {bus} has zero angle, attack would be null")));
        }
        c[j] = (spec.scale - 1.0) * x_hat.angles_rad[j];
    }

    let mut a = vec![0.0; model.num_meters()];
    for (j, &cj) in c.iter().enumerate() {
        if cj == 0.0 {
            continue;
        }
        for (i, ai) in a.iter_mut().enumerate() {
            *ai += model.h[(i, j)] * cj;
        }
    }
    Ok(AttackVector { a, c, label: 0 })
}

pub fn apply_attack(z: &MeasurementVector, atk: &AttackVector) -> MeasurementVector {
    assert_eq!(z.len(), atk.a.len(), "attack length");
    MeasurementVector::new(z.values_pu.iter().zip(&atk.a).map(|(v, a)| v + a).collect())
}

/// Before/after numbers for one attack on a noisy nominal operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct StealthDemo {
    pub target: BusId,
    pub scale: f64,
    pub residual_before: f64,
    pub residual_after: f64,
    pub threshold: f64,
    pub angle_before: f64,
    pub angle_after: f64,
    pub max_injection: f64,
}

impl StealthDemo {
    pub fn residual_delta(&self) -> f64 {
        (self.residual_after - self.residual_before).abs()
    }
}

/// Solves the nominal DC power flow, adds seeded meter noise, estimates,
/// attacks `target` and re-estimates.
pub fn stealth_demo(case: &GridCase, target: BusId, scale: f64, sigma: f64, alpha: f64, seed: u64) -> Result<StealthDemo> {
    let model = build_dc_model(case, sigma)?;
    let (_, clean) = dc_power_flow(case, &case.nominal_loads_pu())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = MeasurementVector::new(
        clean
            .values_pu
            .iter()
            .map(|v| {
                let e: f64 = rng.sample(StandardNormal);
                v + sigma * e
            })
            .collect(),
    );
    let est = WlsEstimator::new(&model)?;
    let x = est.estimate(&z)?;
    let atk = craft_fdia(&model, &x, &AttackSpec::single(target, scale))?;
    let za = apply_attack(&z, &atk);
    let xa = est.estimate(&za)?;
    let j = model.state_position(target).expect("checked by craft_fdia");
    Ok(StealthDemo {
        target,
        scale,
        residual_before: bdd_residual(&model, &z, &x),
        residual_after: bdd_residual(&model, &za, &xa),
        threshold: bdd_threshold(&model, alpha)?,
        angle_before: x.angles_rad[j],
        angle_after: xa.angles_rad[j],
        max_injection: atk.a.iter().fold(0.0, |m, v| m.max(v.abs())),
    })
}
