//! A small CNN/MLP stack with hand-written backpropagation, the Adam
//! optimizer, a training loop and a binary checkpoint format.

mod checkpoint;
mod layers;
mod ops;
mod optim;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{Layer, LayerSpec};
pub use optim::{Adam, AdamConfig};
pub use train::{train, write_history_csv, Control, EpochRecord, TrainConfig, TrainState};

use layers::{softmax_rows, Mode};

use crate::error::{Error, Result};

/// Dense row-major array. The first axis is the batch wherever a batch is
/// involved.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("tensor shape {shape:?} must be non-empty and positive")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` along the first axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    /// Copies rows `idx` (along the first axis) into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Tensor { shape, data }
    }
}

/// Parameter gradients, laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub per_layer: Vec<Vec<Tensor>>,
}

/// Everything one forward/backward pass produces.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub probs: Tensor,
    pub grads: Gradients,
    pub input_grad: Option<Tensor>,
}

/// Which behaviour dropout and batchnorm use in a pass.
pub enum Pass<'a> {
    /// Dropout off, batchnorm on running statistics.
    Frozen,
    /// Dropout masks drawn from the RNG, batchnorm on batch statistics
    /// (running statistics are updated).
    Training(&'a mut ChaCha8Rng),
}

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    rng_seed: u64,
}

impl ClassifierModel {
    /// Resolves shapes through the stack and initializes weights with
    /// fan-in scaled uniform noise from `seed`. Biases start at zero,
    /// batchnorm at the identity.
    pub fn new(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut model = Self::empty(input_shape, specs, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            match layer.spec {
                LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                    let fan_in: usize = layer.params[0].shape()[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    for w in layer.params[0].data_mut() {
                        *w = rng.random_range(-limit..limit);
                    }
                }
                LayerSpec::BatchNorm => {
                    layer.params[0].data_mut().fill(1.0);
                    layer.buffers[1].data_mut().fill(1.0);
                }
                _ => {}
            }
        }
        Ok(model)
    }

    /// Shape-checked model with all parameters and buffers zeroed.
    pub(crate) fn empty(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("input shape {input_shape:?} must be non-empty and positive")));
        }
        match specs.iter().position(|s| *s == LayerSpec::Softmax) {
            Some(i) if i + 1 == specs.len() => {}
            _ => return Err(Error::Shape("the last layer, and only the last, must be softmax".into())),
        }
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let (out, params, buffers) = spec
                .plan(&shape)
                .map_err(|e| Error::Shape(format!("layer {i}: {}", e.to_string().trim_start_matches("shape error: "))))?;
            layers.push(Layer {
                spec: *spec,
                in_shape: shape,
                out_shape: out.clone(),
                params: params.into_iter().map(Tensor::zeros).collect(),
                buffers: buffers.into_iter().map(Tensor::zeros).collect(),
            });
            shape = out;
        }
        match shape.as_slice() {
            [k] if *k >= 2 => {}
            _ => return Err(Error::Shape(format!("output must be a vector of at least 2 classes, got {shape:?}"))),
        }
        Ok(Self { input_shape, layers, rng_seed: seed })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("model has layers").out_shape[0]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::len).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            per_layer: self
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect())
                .collect(),
        }
    }

    fn batch_of(&self, x: &Tensor) -> Result<usize> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input batch x {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(x.shape()[0])
    }

    /// Inference-mode class probabilities, `batch x K`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.batch_of(x)?;
        let mut a = x.data().to_vec();
        for layer in &self.layers {
            a = layer.forward(a, batch, &mut Mode::Inference, false).0;
            debug_assert!(a.iter().all(|v| v.is_finite()), "non-finite activation after {}", layer.spec.kind());
        }
        Tensor::new(vec![batch, self.num_classes()], a)
    }

    /// Mean cross-entropy of `labels` (class indices) and its gradients.
    pub fn loss_and_gradients(&mut self, x: &Tensor, labels: &[usize], pass: Pass) -> Result<(f64, Gradients)> {
        let b = self.backprop(x, labels, pass, false)?;
        Ok((b.loss, b.grads))
    }

    /// Forward pass, fused softmax/cross-entropy, and reverse pass through
    /// every layer. In a training pass the batchnorm running statistics are
    /// updated after the forward sweep.
    pub fn backprop(&mut self, x: &Tensor, labels: &[usize], pass: Pass, want_input_grad: bool) -> Result<Backprop> {
        let batch = self.batch_of(x)?;
        let k = self.num_classes();
        if labels.len() != batch {
            return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::input(format!("label {l} out of range for {k} classes")));
        }
        let (mut mode, training) = match pass {
            Pass::Frozen => (Mode::Inference, false),
            Pass::Training(rng) => (Mode::Training(rng), true),
        };

        let body = &self.layers[..self.layers.len() - 1];
        let mut a = x.data().to_vec();
        let mut caches = Vec::with_capacity(body.len());
        let mut stats = Vec::new();
        for (i, layer) in body.iter().enumerate() {
            let (y, cache, s) = layer.forward(a, batch, &mut mode, true);
            caches.push(cache);
            if let Some(s) = s {
                stats.push((i, s));
            }
            a = y;
        }
        let mut probs = a;
        softmax_rows(&mut probs, k);
        let mut loss = 0.0;
        let mut d = probs.clone();
        for (row, &l) in d.chunks_exact_mut(k).zip(labels) {
            loss -= if row[l].is_nan() { f64::NAN } else { row[l].max(LOG_CLAMP).ln() };
            row[l] -= 1.0;
        }
        loss /= batch as f64;
        d.iter_mut().for_each(|v| *v /= batch as f64);

        let mut grads = self.zero_gradients();
        let mut dy = Some(d);
        for (i, (layer, cache)) in body.iter().zip(caches).enumerate().rev() {
            let need = i > 0 || want_input_grad;
            dy = layer.backward(cache, dy.take().expect("gradient flows"), batch, &mut grads.per_layer[i], need);
        }
        if training {
            for (i, [mean, var]) in stats {
                let bufs = &mut self.layers[i].buffers;
                for (r, m) in bufs[0].data_mut().iter_mut().zip(mean) {
                    *r = layers::BN_MOMENTUM * *r + (1.0 - layers::BN_MOMENTUM) * m;
                }
                for (r, v) in bufs[1].data_mut().iter_mut().zip(var) {
                    *r = layers::BN_MOMENTUM * *r + (1.0 - layers::BN_MOMENTUM) * v;
                }
            }
        }
        let input_grad = match (want_input_grad, dy) {
            (true, Some(g)) => Some(Tensor::new(x.shape().to_vec(), g)?),
            _ => None,
        };
        Ok(Backprop { loss, probs: Tensor::new(vec![batch, k], probs)?, grads, input_grad })
    }

    /// Argmax labels (lowest index wins ties) and the probability matrix.
    pub fn predict(&self, x: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        const CHUNK: usize = 64;
        let n = self.batch_of(x)?;
        let k = self.num_classes();
        let mut probs = Vec::with_capacity(n * k);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            probs.extend_from_slice(self.forward(&x.gather_rows(&idx))?.data());
        }
        let probs = Tensor::new(vec![n, k], probs)?;
        let labels = (0..n).map(|i| argmax(probs.row(i))).collect();
        Ok((labels, probs))
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnOptions {
    pub input_hw: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub dense_units: usize,
    pub batchnorm: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl CnnOptions {
    pub fn new(input_hw: usize, channels: usize, num_classes: usize, seed: u64) -> Self {
        Self { input_hw, channels, num_classes, dense_units: 128, batchnorm: true, dropout: 0.25, seed }
    }
}

/// Five 3x3 convolutions (32, 32, 64, 64, 128 filters), each followed by
/// ReLU and optional batchnorm, with 2x2 max pooling after the second and
/// fourth, then dropout, one hidden dense layer and the softmax output.
pub fn build_cnn(opts: &CnnOptions) -> Result<ClassifierModel> {
    if opts.num_classes < 2 {
        return Err(Error::input(format!("need at least 2 classes, got {}", opts.num_classes)));
    }
    if opts.input_hw < 8 {
        return Err(Error::input(format!(
            "input side {} is too small for two pooling stages (minimum 8)",
            opts.input_hw
        )));
    }
    let mut specs = Vec::new();
    for (i, filters) in [32, 32, 64, 64, 128].into_iter().enumerate() {
        specs.push(LayerSpec::conv_same(filters));
        specs.push(LayerSpec::Relu);
        if opts.batchnorm {
            specs.push(LayerSpec::BatchNorm);
        }
        if i == 1 || i == 3 {
            specs.push(LayerSpec::MaxPool { window: 2, stride: 2 });
        }
    }
    specs.extend([
        LayerSpec::Dropout { rate: opts.dropout },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: opts.dense_units },
        LayerSpec::Relu,
        LayerSpec::Dense { units: opts.num_classes },
        LayerSpec::Softmax,
    ]);
    ClassifierModel::new(vec![opts.channels, opts.input_hw, opts.input_hw], &specs, opts.seed)
}

pub fn build_paper_cnn(input_hw: usize, channels: usize, num_classes: usize, seed: u64) -> Result<ClassifierModel> {
    build_cnn(&CnnOptions::new(input_hw, channels, num_classes, seed))
}

/// Dense/ReLU stack on raw feature vectors.
pub fn build_mlp_baseline(input_len: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<ClassifierModel> {
    if hidden.is_empty() {
        return Err(Error::input("MLP needs at least one hidden layer"));
    }
    if input_len == 0 {
        return Err(Error::input("MLP input length must be positive"));
    }
    let mut specs = Vec::new();
    for &units in hidden {
        specs.push(LayerSpec::Dense { units });
        specs.push(LayerSpec::Relu);
    }
    specs.push(LayerSpec::Dense { units: num_classes });
    specs.push(LayerSpec::Softmax);
    ClassifierModel::new(vec![input_len], &specs, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn paper_cnn_shapes() {
        let m = build_paper_cnn(32, 1, 14, 0).unwrap();
        let flat = m.layers().iter().find(|l| l.spec == LayerSpec::Flatten).unwrap();
        assert_eq!(flat.in_shape, vec![128, 8, 8]);
        let m = build_paper_cnn(136, 1, 14, 0).unwrap();
        let flat = m.layers().iter().find(|l| l.spec == LayerSpec::Flatten).unwrap();
        assert_eq!(flat.in_shape, vec![128, 34, 34]);
        assert!(build_paper_cnn(32, 1, 1, 0).is_err());
        assert!(build_paper_cnn(7, 1, 14, 0).is_err());
        let no_bn = build_cnn(&CnnOptions { batchnorm: false, ..CnnOptions::new(16, 1, 3, 0) }).unwrap();
        assert!(no_bn.specs().iter().all(|s| *s != LayerSpec::BatchNorm));
    }

    #[test]
    fn mlp_param_count() {
        let m = build_mlp_baseline(136, &[64, 128], 14, 0).unwrap();
        let expect = (136 * 64 + 64) + (64 * 128 + 128) + (128 * 14 + 14);
        assert_eq!(m.num_params(), expect);
        assert_eq!(m.num_params(), 18_894);
        let p = m.forward(&rand_tensor(vec![5, 136], 1)).unwrap();
        assert_eq!(p.shape(), &[5, 14]);
        assert!(build_mlp_baseline(136, &[], 14, 0).is_err());
    }

    #[test]
    fn bad_stacks_rejected() {
        let dense_on_image = [LayerSpec::Dense { units: 3 }, LayerSpec::Softmax];
        assert!(ClassifierModel::new(vec![1, 4, 4], &dense_on_image, 0).is_err());
        let no_softmax = [LayerSpec::Flatten, LayerSpec::Dense { units: 3 }];
        assert!(ClassifierModel::new(vec![1, 4, 4], &no_softmax, 0).is_err());
        let early = [LayerSpec::Softmax, LayerSpec::Flatten, LayerSpec::Dense { units: 3 }, LayerSpec::Softmax];
        assert!(ClassifierModel::new(vec![3], &early, 0).is_err());
    }

    #[test]
    fn identity_conv_and_pool() {
        let specs = [
            LayerSpec::Conv2d { filters: 1, kernel: 1, stride: 1, padding: 0 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ];
        let mut m = ClassifierModel::new(vec![1, 2, 2], &specs, 0).unwrap();
        m.layers_mut()[0].params[0].data_mut()[0] = 1.0;
        let x = vec![1.0, -2.0, 3.0, 0.5];
        let (y, _, _) = m.layers()[0].forward(x.clone(), 1, &mut Mode::Inference, false);
        assert_eq!(y, x);

        let pool = ClassifierModel::new(
            vec![1, 2, 2],
            &[LayerSpec::MaxPool { window: 2, stride: 2 }, LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
            0,
        )
        .unwrap();
        let (y, _, _) = pool.layers()[0].forward(vec![1.0, 2.0, 3.0, 4.0], 1, &mut Mode::Inference, false);
        assert_eq!(y, vec![4.0]);
    }

    #[test]
    fn zero_dense_gives_uniform_and_tie_break() {
        let mut m = build_mlp_baseline(4, &[3], 14, 0).unwrap();
        let last = m.layers().len() - 2;
        m.layers_mut()[last].params[0].data_mut().fill(0.0);
        let x = rand_tensor(vec![3, 4], 2);
        let (labels, p) = m.predict(&x).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 14.0).abs() < 1e-15));
        assert_eq!(labels, vec![0, 0, 0]);
        let (loss, _) = m.loss_and_gradients(&x, &[3, 5, 13], Pass::Frozen).unwrap();
        assert!((loss - 14f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let mut m = build_mlp_baseline(2, &[2], 2, 0).unwrap();
        let last = m.layers().len() - 2;
        m.layers_mut()[last].params[1].data_mut().copy_from_slice(&[800.0, 0.0]);
        let (loss, _) = m.loss_and_gradients(&rand_tensor(vec![2, 2], 3), &[0, 0], Pass::Frozen).unwrap();
        assert_eq!(loss, 0.0);
        // the clamp keeps a hopeless prediction finite
        let (loss, _) = m.loss_and_gradients(&rand_tensor(vec![1, 2], 3), &[1], Pass::Frozen).unwrap();
        assert!((loss + LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let m = ClassifierModel::new(
            vec![1],
            &[LayerSpec::Dropout { rate: 0.25 }, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
            0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let (y, _, _) = m.layers()[0].forward(vec![2.0; n], n, &mut Mode::Training(&mut rng), false);
        let mean = y.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.04, "{mean}");
        let (y, _, _) = m.layers()[0].forward(vec![2.0; 5], 5, &mut Mode::Inference, false);
        assert_eq!(y, vec![2.0; 5]);
    }

    #[test]
    fn frozen_batchnorm_inverts() {
        let specs = [LayerSpec::BatchNorm, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax];
        let mut bn = ClassifierModel::new(vec![3], &specs, 0).unwrap();
        let (gamma, beta, mean, var) = ([1.5, -0.7, 2.0], [0.3, 1.0, -2.0], [0.1, -0.4, 3.0], [0.5, 2.0, 0.01]);
        {
            let l = &mut bn.layers_mut()[0];
            l.params[0].data_mut().copy_from_slice(&gamma);
            l.params[1].data_mut().copy_from_slice(&beta);
            l.buffers[0].data_mut().copy_from_slice(&mean);
            l.buffers[1].data_mut().copy_from_slice(&var);
        }
        let mut inv = bn.clone();
        {
            let l = &mut inv.layers_mut()[0];
            for c in 0..3 {
                l.params[0].data_mut()[c] = gamma[c].signum();
                l.buffers[1].data_mut()[c] = gamma[c] * gamma[c] / (var[c] + layers::BN_EPS) - layers::BN_EPS;
            }
            l.params[1].data_mut().copy_from_slice(&mean);
            l.buffers[0].data_mut().copy_from_slice(&beta);
        }
        let x = vec![0.3, -1.2, 4.0, 2.0, 0.0, -0.5];
        let (y, _, _) = bn.layers()[0].forward(x.clone(), 2, &mut Mode::Inference, false);
        let (back, _, _) = inv.layers()[0].forward(y, 2, &mut Mode::Inference, false);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn maxpool_routes_to_argmax_only() {
        let specs = [LayerSpec::MaxPool { window: 2, stride: 2 }, LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax];
        let m = ClassifierModel::new(vec![1, 4, 4], &specs, 0).unwrap();
        let x = rand_tensor(vec![1, 1, 4, 4], 9).into_data();
        let (_, cache, _) = m.layers()[0].forward(x.clone(), 1, &mut Mode::Inference, true);
        let dx = m.layers()[0].backward(cache, vec![1.0, 2.0, 3.0, 4.0], 1, &mut [], true).unwrap();
        assert_eq!(dx.iter().filter(|v| **v != 0.0).count(), 4);
        for (w, g) in [(0usize, 1.0), (1, 2.0), (2, 3.0), (3, 4.0)] {
            let (wy, wx) = (w / 2 * 2, w % 2 * 2);
            let cells = [(wy, wx), (wy, wx + 1), (wy + 1, wx), (wy + 1, wx + 1)];
            let best = cells.iter().copied().max_by(|a, b| x[a.0 * 4 + a.1].total_cmp(&x[b.0 * 4 + b.1])).unwrap();
            assert_eq!(dx[best.0 * 4 + best.1], g);
        }
    }
}
