use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{col2im, gemm, im2col, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

/// Output shape, per-layer input shapes, per-layer output shapes.
pub(crate) type Plan = (Vec<usize>, Vec<Vec<usize>>, Vec<Vec<usize>>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    /// Per-channel normalization with learned scale and shift.
    BatchNorm,
    MaxPool { window: usize, stride: usize },
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize },
    Softmax,
}

impl LayerSpec {
    /// 3x3, stride 1, padding 1.
    pub fn conv_same(filters: usize) -> Self {
        LayerSpec::Conv2d { filters, kernel: 3, stride: 1, padding: 1 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for a per-sample input shape, with the shapes of the
    /// trainable parameters and of the non-trainable buffers.
    pub(crate) fn plan(&self, input: &[usize]) -> Result<Plan> {
        let bad = |msg: String| Err(Error::Shape(format!("{}: {msg}", self.kind())));
        match *self {
            LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                let &[c, h, w] = input else { return bad(format!("needs a c x h x w input, got {input:?}")) };
                if filters == 0 || kernel == 0 || stride == 0 {
                    return bad("filters, kernel and stride must be positive".into());
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return bad(format!("kernel {kernel} larger than padded input {h}x{w}"));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok((vec![filters, oh, ow], vec![vec![filters, c, kernel, kernel], vec![filters]], vec![]))
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok((input.to_vec(), vec![], vec![])),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("rate must lie in [0, 1), got {rate}"));
                }
                Ok((input.to_vec(), vec![], vec![]))
            }
            LayerSpec::BatchNorm => {
                let c = input[0];
                Ok((input.to_vec(), vec![vec![c], vec![c]], vec![vec![c], vec![c]]))
            }
            LayerSpec::MaxPool { window, stride } => {
                let &[c, h, w] = input else { return bad(format!("needs a c x h x w input, got {input:?}")) };
                if window == 0 || stride == 0 {
                    return bad("window and stride must be positive".into());
                }
                if h < window || w < window {
                    return bad(format!("window {window} larger than input {h}x{w}"));
                }
                Ok((vec![c, (h - window) / stride + 1, (w - window) / stride + 1], vec![], vec![]))
            }
            LayerSpec::Flatten => Ok((vec![input.iter().product()], vec![], vec![])),
            LayerSpec::Dense { units } => {
                let &[n] = input else { return bad(format!("needs a flat input, got {input:?}")) };
                if units == 0 {
                    return bad("units must be positive".into());
                }
                Ok((vec![units], vec![vec![units, n], vec![units]], vec![]))
            }
        }
    }
}

/// One layer with its resolved shapes and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Conv/dense: weight, bias. Batchnorm: scale, shift.
    pub params: Vec<Tensor>,
    /// Batchnorm running mean and variance.
    pub buffers: Vec<Tensor>,
}

pub(crate) enum Cache {
    None,
    Input(Vec<f64>),
    Mask(Vec<bool>),
    Argmax(Vec<usize>),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Scale(Vec<f64>),
}

pub(crate) enum Mode<'a> {
    Inference,
    Training(&'a mut ChaCha8Rng),
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Layer {
    fn geom(&self) -> ConvGeom {
        let LayerSpec::Conv2d { kernel, stride, padding, .. } = self.spec else { unreachable!() };
        ConvGeom {
            c_in: self.in_shape[0],
            h: self.in_shape[1],
            w: self.in_shape[2],
            k: kernel,
            stride,
            pad: padding,
            oh: self.out_shape[1],
            ow: self.out_shape[2],
        }
    }

    /// Returns the output, the backward cache (when `keep`), and fresh batch
    /// statistics for a batchnorm layer in training mode.
    pub(crate) fn forward(&self, x: Vec<f64>, batch: usize, mode: &mut Mode, keep: bool) -> (Vec<f64>, Cache, Option<[Vec<f64>; 2]>) {
        let n_in = numel(&self.in_shape);
        let n_out = numel(&self.out_shape);
        debug_assert_eq!(x.len(), batch * n_in);
        match self.spec {
            LayerSpec::Conv2d { filters, .. } => {
                let g = self.geom();
                let (w, b) = (self.params[0].data(), self.params[1].data());
                let mut cols = vec![0.0; g.rows() * g.cols()];
                let mut y = vec![0.0; batch * n_out];
                let hw = g.cols();
                for s in 0..batch {
                    im2col(&g, &x[s * n_in..(s + 1) * n_in], &mut cols);
                    let ys = &mut y[s * n_out..(s + 1) * n_out];
                    gemm(filters, g.rows(), hw, w, false, &cols, false, ys, 0.0);
                    for (f, row) in ys.chunks_exact_mut(hw).enumerate() {
                        row.iter_mut().for_each(|v| *v += b[f]);
                    }
                }
                (y, if keep { Cache::Input(x) } else { Cache::None }, None)
            }
            LayerSpec::Relu => {
                let mut y = x;
                // NaN passes through so the loss check downstream sees it
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                let mask: Vec<bool> = y.iter().map(|v| !(*v <= 0.0)).collect();
                y.iter_mut().zip(&mask).for_each(|(v, &m)| {
                    if !m {
                        *v = 0.0
                    }
                });
                (y, if keep { Cache::Mask(mask) } else { Cache::None }, None)
            }
            LayerSpec::BatchNorm => self.batchnorm_forward(x, batch, mode, keep),
            LayerSpec::MaxPool { window, stride } => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                let mut y = vec![0.0; batch * n_out];
                let mut arg = if keep { vec![0usize; batch * n_out] } else { Vec::new() };
                for s in 0..batch {
                    for ch in 0..c {
                        let base = s * n_in + ch * h * w;
                        let obase = s * n_out + ch * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = base + oy * stride * w + ox * stride;
                                for dy in 0..window {
                                    for dx in 0..window {
                                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                                        if x[i] > x[best] {
                                            best = i;
                                        }
                                    }
                                }
                                y[obase + oy * ow + ox] = x[best];
                                if keep {
                                    arg[obase + oy * ow + ox] = best;
                                }
                            }
                        }
                    }
                }
                (y, if keep { Cache::Argmax(arg) } else { Cache::None }, None)
            }
            LayerSpec::Dropout { rate } => match mode {
                Mode::Training(rng) if rate > 0.0 => {
                    let keep_scale = 1.0 / (1.0 - rate);
                    let scale: Vec<f64> =
                        (0..x.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale }).collect();
                    let y = x.iter().zip(&scale).map(|(v, s)| v * s).collect();
                    (y, if keep { Cache::Scale(scale) } else { Cache::None }, None)
                }
                _ => (x, Cache::None, None),
            },
            LayerSpec::Flatten => (x, Cache::None, None),
            LayerSpec::Dense { units } => {
                let (w, b) = (self.params[0].data(), self.params[1].data());
                let mut y = vec![0.0; batch * units];
                gemm(batch, n_in, units, &x, false, w, true, &mut y, 0.0);
                for row in y.chunks_exact_mut(units) {
                    row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
                }
                (y, if keep { Cache::Input(x) } else { Cache::None }, None)
            }
            LayerSpec::Softmax => {
                let mut y = x;
                softmax_rows(&mut y, n_in);
                (y, Cache::None, None)
            }
        }
    }

    fn batchnorm_forward(&self, x: Vec<f64>, batch: usize, mode: &mut Mode, keep: bool) -> (Vec<f64>, Cache, Option<[Vec<f64>; 2]>) {
        let c = self.in_shape[0];
        let spatial = numel(&self.in_shape[1..]);
        let (gamma, beta) = (self.params[0].data(), self.params[1].data());
        let count = (batch * spatial) as f64;
        let channel = |s: usize, ch: usize| {
            let start = (s * c + ch) * spatial;
            start..start + spatial
        };

        let (mean, var, stats) = match mode {
            Mode::Training(_) => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let sum: f64 = (0..batch).map(|s| x[channel(s, ch)].iter().sum::<f64>()).sum();
                    let mu = sum / count;
                    let sq: f64 = (0..batch).map(|s| x[channel(s, ch)].iter().map(|v| (v - mu).powi(2)).sum::<f64>()).sum();
                    mean[ch] = mu;
                    var[ch] = sq / count;
                }
                (mean.clone(), var.clone(), Some([mean, var]))
            }
            Mode::Inference => (self.buffers[0].data().to_vec(), self.buffers[1].data().to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut y = x;
        let mut xhat = if keep { vec![0.0; y.len()] } else { Vec::new() };
        for s in 0..batch {
            for ch in 0..c {
                let r = channel(s, ch);
                for i in r {
                    let h = (y[i] - mean[ch]) * inv_std[ch];
                    if keep {
                        xhat[i] = h;
                    }
                    y[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
        let batch_stats = stats.is_some();
        let cache = if keep { Cache::Norm { xhat, inv_std, batch_stats } } else { Cache::None };
        (y, cache, stats)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx`.
    pub(crate) fn backward(&self, cache: Cache, dy: Vec<f64>, batch: usize, grads: &mut [Tensor], need_dx: bool) -> Option<Vec<f64>> {
        let n_in = numel(&self.in_shape);
        let n_out = numel(&self.out_shape);
        match (self.spec, cache) {
            (LayerSpec::Conv2d { filters, .. }, Cache::Input(x)) => {
                let g = self.geom();
                let hw = g.cols();
                let w = self.params[0].data();
                let mut cols = vec![0.0; g.rows() * hw];
                let mut dcols = if need_dx { vec![0.0; g.rows() * hw] } else { Vec::new() };
                let mut dx = if need_dx { vec![0.0; batch * n_in] } else { Vec::new() };
                let (dw, db) = grads.split_at_mut(1);
                for s in 0..batch {
                    let dys = &dy[s * n_out..(s + 1) * n_out];
                    im2col(&g, &x[s * n_in..(s + 1) * n_in], &mut cols);
                    gemm(filters, hw, g.rows(), dys, false, &cols, true, dw[0].data_mut(), 1.0);
                    for (f, row) in dys.chunks_exact(hw).enumerate() {
                        db[0].data_mut()[f] += row.iter().sum::<f64>();
                    }
                    if need_dx {
                        gemm(g.rows(), filters, hw, w, true, dys, false, &mut dcols, 0.0);
                        col2im(&g, &dcols, &mut dx[s * n_in..(s + 1) * n_in]);
                    }
                }
                need_dx.then_some(dx)
            }
            (LayerSpec::Relu, Cache::Mask(mask)) => {
                let mut dx = dy;
                dx.iter_mut().zip(&mask).for_each(|(v, &m)| {
                    if !m {
                        *v = 0.0
                    }
                });
                Some(dx)
            }
            (LayerSpec::BatchNorm, Cache::Norm { xhat, inv_std, batch_stats }) => {
                let c = self.in_shape[0];
                let spatial = numel(&self.in_shape[1..]);
                let gamma = self.params[0].data();
                let count = (batch * spatial) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..batch {
                    for ch in 0..c {
                        let start = (s * c + ch) * spatial;
                        for i in start..start + spatial {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                for ch in 0..c {
                    grads[0].data_mut()[ch] += sum_dy_xhat[ch];
                    grads[1].data_mut()[ch] += sum_dy[ch];
                }
                if !need_dx {
                    return None;
                }
                let mut dx = dy;
                for s in 0..batch {
                    for ch in 0..c {
                        let k = gamma[ch] * inv_std[ch];
                        let start = (s * c + ch) * spatial;
                        for i in start..start + spatial {
                            dx[i] = if batch_stats {
                                k * (dx[i] - sum_dy[ch] / count - xhat[i] * sum_dy_xhat[ch] / count)
                            } else {
                                k * dx[i]
                            };
                        }
                    }
                }
                Some(dx)
            }
            (LayerSpec::MaxPool { .. }, Cache::Argmax(arg)) => {
                let mut dx = vec![0.0; batch * n_in];
                for (g, &i) in dy.iter().zip(&arg) {
                    dx[i] += g;
                }
                Some(dx)
            }
            (LayerSpec::Dropout { .. }, Cache::Scale(scale)) => Some(dy.iter().zip(&scale).map(|(g, s)| g * s).collect()),
            (LayerSpec::Dropout { .. } | LayerSpec::Flatten, Cache::None) => Some(dy),
            (LayerSpec::Dense { units }, Cache::Input(x)) => {
                let w = self.params[0].data();
                gemm(units, batch, n_in, &dy, true, &x, false, grads[0].data_mut(), 1.0);
                for row in dy.chunks_exact(units) {
                    grads[1].data_mut().iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
                need_dx.then(|| {
                    let mut dx = vec![0.0; batch * n_in];
                    gemm(batch, units, n_in, &dy, false, w, false, &mut dx, 0.0);
                    dx
                })
            }
            (spec, _) => unreachable!("no backward cache for {}", spec.kind()),
        }
    }
}

/// In-place numerically stable softmax over consecutive rows of `width`.
pub(crate) fn softmax_rows(x: &mut [f64], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}
