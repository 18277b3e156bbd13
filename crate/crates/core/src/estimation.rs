//! DC power flow, weighted-least-squares state estimation and residual-based
//! bad data detection.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::grid::{BusType, GridCase, MeasurementModel};
use crate::stats::chi_square_quantile;

/// Bus voltage angles of the non-slack buses, ordered like
/// `MeasurementModel::state_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub angles_rad: Vec<f64>,
}

/// Per-unit active power readings ordered like `MeasurementModel::meter_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub values_pu: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BddResult {
    pub residual_norm: f64,
    pub threshold: f64,
    pub flagged: bool,
}

impl StateVector {
    pub fn new(angles_rad: Vec<f64>) -> Self {
        Self { angles_rad }
    }

    pub fn len(&self) -> usize {
        self.angles_rad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_rad.is_empty()
    }
}

impl MeasurementVector {
    pub fn new(values_pu: Vec<f64>) -> Self {
        Self { values_pu }
    }

    pub fn len(&self) -> usize {
        self.values_pu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_pu.is_empty()
    }
}

/// Smallest accepted ratio between a squared Cholesky pivot and the largest
/// diagonal entry of the factored matrix.
const PIVOT_RATIO: f64 = 1e-12;

fn factor(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let max_diag = m.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let chol = m.cholesky()?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b * b));
    (max_diag > 0.0 && min_pivot > PIVOT_RATIO * max_diag).then_some(chol)
}

/// DC power flow with a factored reduced susceptance matrix, reusable over
/// many load snapshots.
pub struct DcPowerFlow {
    b_reduced: Cholesky<f64, Dyn>,
    /// bus position (in case order) -> reduced column, None for the slack
    reduced_pos: Vec<Option<usize>>,
    /// (from position, to position, 1/x) for every in-service branch
    lines: Vec<(usize, usize, f64)>,
    /// per bus fraction of total generation
    dispatch: Vec<f64>,
    has_capacity: bool,
}

impl DcPowerFlow {
    pub fn new(case: &GridCase) -> Result<Self> {
        let n = case.buses.len();
        let mut reduced_pos = Vec::with_capacity(n);
        let mut next = 0;
        for b in &case.buses {
            if b.bus_type == BusType::Slack {
                reduced_pos.push(None);
            } else {
                reduced_pos.push(Some(next));
                next += 1;
            }
        }
        let lines: Vec<(usize, usize, f64)> = case
            .in_service_branches()
            .map(|(_, br)| {
                let f = case.bus_position(br.from_bus).expect("validated");
                let t = case.bus_position(br.to_bus).expect("validated");
                (f, t, 1.0 / br.reactance_pu)
            })
            .collect();

        let mut b = DMatrix::zeros(next, next);
        for &(f, t, y) in &lines {
            if let Some(i) = reduced_pos[f] {
                b[(i, i)] += y;
            }
            if let Some(j) = reduced_pos[t] {
                b[(j, j)] += y;
            }
            if let (Some(i), Some(j)) = (reduced_pos[f], reduced_pos[t]) {
                b[(i, j)] -= y;
                b[(j, i)] -= y;
            }
        }
        let b_reduced = factor(b).ok_or_else(|| Error::Singular("reduced susceptance matrix".into()))?;

        let total_cap: f64 = case.generators.iter().map(|g| g.pmax_mw).sum();
        let mut dispatch = vec![0.0; n];
        if total_cap > 0.0 {
            for g in &case.generators {
                dispatch[case.bus_position(g.bus).expect("validated")] += g.pmax_mw / total_cap;
            }
        }
        Ok(Self { b_reduced, reduced_pos, lines, dispatch, has_capacity: total_cap > 0.0 })
    }

    /// Solves for angles and noise-free branch flows given per-unit bus loads
    /// in case bus order. Generation follows load in proportion to capacity.
    pub fn solve(&self, bus_loads_pu: &[f64]) -> Result<(StateVector, MeasurementVector)> {
        let n = self.reduced_pos.len();
        if bus_loads_pu.len() != n {
            return Err(Error::Shape(format!("expected {n} bus loads, got {}", bus_loads_pu.len())));
        }
        if bus_loads_pu.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite bus load"));
        }
        let total: f64 = bus_loads_pu.iter().sum();
        if total < 0.0 {
            return Err(Error::input(format!("total load {total} is negative")));
        }
        if total > 0.0 && !self.has_capacity {
            return Err(Error::input("nonzero load with zero generation capacity"));
        }

        let mut p = DVector::zeros(self.b_reduced.l_dirty().nrows());
        for (k, pos) in self.reduced_pos.iter().enumerate() {
            if let Some(i) = pos {
                p[*i] = self.dispatch[k] * total - bus_loads_pu[k];
            }
        }
        let theta_red = self.b_reduced.solve(&p);

        let angle = |k: usize| self.reduced_pos[k].map_or(0.0, |i| theta_red[i]);
        let flows = self.lines.iter().map(|&(f, t, y)| (angle(f) - angle(t)) * y).collect();
        Ok((StateVector::new(theta_red.iter().copied().collect()), MeasurementVector::new(flows)))
    }
}

pub fn dc_power_flow(case: &GridCase, bus_loads_pu: &[f64]) -> Result<(StateVector, MeasurementVector)> {
    DcPowerFlow::new(case)?.solve(bus_loads_pu)
}

/// WLS estimator with the gain matrix `H^T W^-1 H` factored once.
#[derive(Clone)]
pub struct WlsEstimator {
    h: DMatrix<f64>,
    w_inv: DVector<f64>,
    gain: Cholesky<f64, Dyn>,
}

impl WlsEstimator {
    pub fn new(model: &MeasurementModel) -> Result<Self> {
        let w_inv = DVector::from_iterator(model.w_diag.len(), model.w_diag.iter().map(|w| 1.0 / w));
        let weighted = DMatrix::from_fn(model.h.nrows(), model.h.ncols(), |i, j| model.h[(i, j)] * w_inv[i]);
        let gain = factor(model.h.transpose() * weighted).ok_or(Error::Unobservable)?;
        Ok(Self { h: model.h.clone(), w_inv, gain })
    }

    pub fn estimate(&self, z: &MeasurementVector) -> Result<StateVector> {
        if z.len() != self.h.nrows() {
            return Err(Error::Shape(format!("expected {} measurements, got {}", self.h.nrows(), z.len())));
        }
        let wz = DVector::from_iterator(z.len(), z.values_pu.iter().zip(self.w_inv.iter()).map(|(a, b)| a * b));
        let mut x = self.gain.solve(&self.h.tr_mul(&wz));
        // One step of iterative refinement on the normal equations; the gain
        // matrix is badly scaled (entries ~ 1/(sigma^2 x_br^2)).
        let r = DVector::from_column_slice(&z.values_pu) - &self.h * &x;
        x += self.gain.solve(&self.h.tr_mul(&r.component_mul(&self.w_inv)));
        Ok(StateVector::new(x.iter().copied().collect()))
    }
}

pub fn wls_estimate(model: &MeasurementModel, z: &MeasurementVector) -> Result<StateVector> {
    WlsEstimator::new(model)?.estimate(z)
}

/// `z - H x`.
pub fn residual(model: &MeasurementModel, z: &MeasurementVector, x: &StateVector) -> Vec<f64> {
    assert_eq!(z.len(), model.num_meters(), "measurement length");
    assert_eq!(x.len(), model.num_states(), "state length");
    let hx = &model.h * DVector::from_column_slice(&x.angles_rad);
    z.values_pu.iter().zip(hx.iter()).map(|(a, b)| a - b).collect()
}

/// Euclidean norm of the measurement residual.
pub fn bdd_residual(model: &MeasurementModel, z: &MeasurementVector, x_hat: &StateVector) -> f64 {
    residual(model, z, x_hat).iter().map(|r| r * r).sum::<f64>().sqrt()
}

/// Detection threshold for `||r||_2` at false-alarm rate `alpha`, assuming
/// `||r||^2 / sigma^2` is chi-square with `m - (n - 1)` degrees of freedom.
pub fn bdd_threshold(model: &MeasurementModel, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::input(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let dof = model.redundancy();
    if dof == 0 {
        return Err(Error::input("no measurement redundancy: m must exceed n - 1"));
    }
    Ok(model.noise_sigma * chi_square_quantile(1.0 - alpha, dof as f64).sqrt())
}

pub fn bdd_check(model: &MeasurementModel, z: &MeasurementVector, x_hat: &StateVector, threshold: f64) -> BddResult {
    let residual_norm = bdd_residual(model, z, x_hat);
    BddResult { residual_norm, threshold, flagged: residual_norm > threshold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_dc_model, parse_case, BusId};

    const TWO_BUS: &str = "mpc.baseMVA = 100;\nmpc.bus = [1 3 0 0 0 0 1 1 0 230; 2 1 100 0 0 0 1 1 0 230];\n\
                           mpc.gen = [1 0 0 0 0 1 100 1 250];\nmpc.branch = [1 2 0 0.5 0 0 0 0 0 0 1];\n";

    fn model_from(h: Vec<Vec<f64>>, sigma: f64) -> MeasurementModel {
        let (m, n) = (h.len(), h[0].len());
        MeasurementModel {
            h: DMatrix::from_fn(m, n, |i, j| h[i][j]),
            w_diag: vec![sigma * sigma; m],
            meter_index: (0..m).collect(),
            state_index: (0..n).map(|j| BusId(j as u32 + 2)).collect(),
            slack: BusId(1),
            noise_sigma: sigma,
        }
    }

    #[test]
    fn two_bus_power_flow() {
        let case = parse_case(TWO_BUS).unwrap();
        let (theta, flows) = dc_power_flow(&case, &[0.0, 1.0]).unwrap();
        assert!((theta.angles_rad[0] + 0.5).abs() < 1e-15);
        assert!((flows.values_pu[0] - 1.0).abs() < 1e-15);

        let (theta, flows) = dc_power_flow(&case, &[0.0, 0.0]).unwrap();
        assert_eq!(theta.angles_rad, vec![0.0]);
        assert_eq!(flows.values_pu, vec![0.0]);
    }

    #[test]
    fn ieee57_nodal_balance() {
        let case = GridCase::ieee57();
        let loads = case.nominal_loads_pu();
        let (_, flows) = dc_power_flow(&case, &loads).unwrap();
        let total: f64 = loads.iter().sum();
        let cap: f64 = case.generators.iter().map(|g| g.pmax_mw).sum();
        let slack = case.slack().id;
        for bus in &case.buses {
            if bus.id == slack {
                continue;
            }
            let gen: f64 = case.generators.iter().filter(|g| g.bus == bus.id).map(|g| g.pmax_mw / cap * total).sum();
            let injection = gen - bus.load_mw / case.base_mva;
            let mut out = 0.0;
            for (k, (_, br)) in case.in_service_branches().enumerate() {
                if br.from_bus == bus.id {
                    out += flows.values_pu[k];
                } else if br.to_bus == bus.id {
                    out -= flows.values_pu[k];
                }
            }
            assert!((out - injection).abs() < 1e-9, "bus {}: {out} vs {injection}", bus.id);
        }
    }

    #[test]
    fn no_capacity_with_load_is_an_error() {
        let text = TWO_BUS.replace("1 100 1 250", "1 100 1 0");
        let case = parse_case(&text).unwrap();
        assert!(dc_power_flow(&case, &[0.0, 1.0]).is_err());
        assert!(dc_power_flow(&case, &[0.0, 0.0]).is_ok());
    }

    #[test]
    fn wls_hand_solved() {
        let model = model_from(vec![vec![1.0], vec![1.0]], 1.0);
        let x = wls_estimate(&model, &MeasurementVector::new(vec![1.0, 3.0])).unwrap();
        assert!((x.angles_rad[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wls_is_invariant_to_weight_scale() {
        let case = GridCase::ieee57();
        let z = MeasurementVector::new((0..80).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect());
        let a = wls_estimate(&build_dc_model(&case, 0.02).unwrap(), &z).unwrap();
        let b = wls_estimate(&build_dc_model(&case, 3.7).unwrap(), &z).unwrap();
        for (u, v) in a.angles_rad.iter().zip(&b.angles_rad) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_is_unobservable() {
        let model = model_from(vec![vec![1.0, -1.0], vec![2.0, -2.0], vec![-1.0, 1.0]], 0.1);
        assert!(matches!(WlsEstimator::new(&model), Err(Error::Unobservable)));
    }

    #[test]
    fn ieee57_threshold_matches_reference() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let model = build_dc_model(&GridCase::ieee57(), 0.02).unwrap();
        let tau = bdd_threshold(&model, 0.01).unwrap();
        let reference = 0.02 * ChiSquared::new(24.0).unwrap().inverse_cdf(0.99).sqrt();
        assert!((tau / reference - 1.0).abs() < 1e-6, "{tau} vs {reference}");
    }

    #[test]
    fn threshold_values() {
        let model = model_from(vec![vec![1.0], vec![1.0]], 0.5);
        let tau = bdd_threshold(&model, 0.3173).unwrap();
        assert!((tau / 0.5 - 1.0).abs() < 1e-4, "{tau}");
        let mut prev = 0.0;
        for alpha in [0.9, 0.5, 0.1, 0.01, 1e-4, 1e-8] {
            let t = bdd_threshold(&model, alpha).unwrap();
            assert!(t > prev);
            prev = t;
        }
        assert!(bdd_threshold(&model, 0.0).is_err());
        assert!(bdd_threshold(&model, 1.0).is_err());
        let square = model_from(vec![vec![1.0]], 0.5);
        assert!(bdd_threshold(&square, 0.01).is_err());
    }

    #[test]
    fn noise_free_residual_is_zero() {
        let case = GridCase::ieee57();
        let model = build_dc_model(&case, 0.02).unwrap();
        let (_, z) = dc_power_flow(&case, &case.nominal_loads_pu()).unwrap();
        let x = wls_estimate(&model, &z).unwrap();
        assert!(bdd_residual(&model, &z, &x) < 1e-9);
    }
}
