use super::{ClassifierModel, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept per parameter value, in the
/// model's parameter order, and created on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of steps taken so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, model: &mut ClassifierModel, grads: &Gradients) -> Result<()> {
        let params: Vec<_> = model.layers_mut().iter_mut().flat_map(|l| l.params.iter_mut()).collect();
        let flat_grads: Vec<_> = grads.per_layer.iter().flatten().collect();
        if params.len() != flat_grads.len() || params.iter().zip(&flat_grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::Shape("gradients do not match model parameters".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::Shape("optimizer state does not match model parameters".into()));
        }
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (((p, g), m), v) in params.into_iter().zip(flat_grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_mlp_baseline;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut model = build_mlp_baseline(3, &[4], 2, 1).unwrap();
        let before = model.clone();
        let mut adam = Adam::new(AdamConfig::default());
        let g = model.zero_gradients();
        for _ in 0..5 {
            adam.step(&mut model, &g).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        // Iterating the recurrence by hand: with a constant gradient the bias
        // corrected ratio m/sqrt(v) is exactly sign(g) at every step.
        let mut model = build_mlp_baseline(1, &[1], 2, 1).unwrap();
        let mut g = model.zero_gradients();
        g.per_layer[0][0].data_mut()[0] = 0.37;
        let mut adam = Adam::new(AdamConfig::default());
        let mut last = model.layers()[0].params[0].data()[0];
        for step in 1..=200 {
            adam.step(&mut model, &g).unwrap();
            let now = model.layers()[0].params[0].data()[0];
            let delta = last - now;
            assert!((delta - 1e-3).abs() < 1e-10, "step {step}: {delta}");
            last = now;
        }
    }
}
