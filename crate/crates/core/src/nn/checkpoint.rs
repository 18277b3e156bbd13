//! Binary checkpoint, little-endian:
//!
//! ```text
//! "FDNN" magic, version u32, rng seed u64
//! input rank u32, dims u64...
//! layer count u32, then per layer: kind u8 + four u64 fields
//! per layer: tensor count u32, then per tensor: rank u32, dims u64..., f64 values
//! optimizer flag u8; when 1: lr, beta1, beta2, eps (f64), step u64,
//!   finished epochs u64, first then second moments for every parameter
//! ```

use std::fs;
use std::path::Path;

use super::{Adam, AdamConfig, ClassifierModel, LayerSpec, Tensor, TrainState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDNN";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn encode_spec(spec: &LayerSpec) -> (u8, [u64; 4]) {
    match *spec {
        LayerSpec::Conv2d { filters, kernel, stride, padding } => {
            (1, [filters as u64, kernel as u64, stride as u64, padding as u64])
        }
        LayerSpec::Relu => (2, [0; 4]),
        LayerSpec::BatchNorm => (3, [0; 4]),
        LayerSpec::MaxPool { window, stride } => (4, [window as u64, stride as u64, 0, 0]),
        LayerSpec::Dropout { rate } => (5, [rate.to_bits(), 0, 0, 0]),
        LayerSpec::Flatten => (6, [0; 4]),
        LayerSpec::Dense { units } => (7, [units as u64, 0, 0, 0]),
        LayerSpec::Softmax => (8, [0; 4]),
    }
}

fn decode_spec(tag: u8, f: [u64; 4]) -> Result<LayerSpec> {
    let u = |i: usize| f[i] as usize;
    Ok(match tag {
        1 => LayerSpec::Conv2d { filters: u(0), kernel: u(1), stride: u(2), padding: u(3) },
        2 => LayerSpec::Relu,
        3 => LayerSpec::BatchNorm,
        4 => LayerSpec::MaxPool { window: u(0), stride: u(1) },
        5 => LayerSpec::Dropout { rate: f64::from_bits(f[0]) },
        6 => LayerSpec::Flatten,
        7 => LayerSpec::Dense { units: u(0) },
        8 => LayerSpec::Softmax,
        _ => return Err(Error::Format(format!("unknown layer kind {tag} in checkpoint"))),
    })
}

fn encode(model: &ClassifierModel, opt: Option<(&Adam, usize)>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(model.rng_seed());
    w.u32(model.input_shape().len() as u32);
    model.input_shape().iter().for_each(|&d| w.u64(d as u64));
    w.u32(model.layers().len() as u32);
    for layer in model.layers() {
        let (tag, fields) = encode_spec(&layer.spec);
        w.u8(tag);
        fields.iter().for_each(|&f| w.u64(f));
    }
    for layer in model.layers() {
        let tensors: Vec<&Tensor> = layer.params.iter().chain(&layer.buffers).collect();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.u32(t.shape().len() as u32);
            t.shape().iter().for_each(|&d| w.u64(d as u64));
            w.f64s(t.data());
        }
    }
    match opt {
        None => w.u8(0),
        Some((adam, epoch)) => {
            w.u8(1);
            let c = adam.config;
            w.f64s(&[c.learning_rate, c.beta1, c.beta2, c.eps]);
            w.u64(adam.t);
            w.u64(epoch as u64);
            w.u8(u8::from(!adam.m.is_empty()));
            adam.m.iter().chain(&adam.v).for_each(|m| w.f64s(m));
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let bytes = self
            .buf
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += N;
        Ok(bytes.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.buf.len() - self.pos < n.saturating_mul(8) {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    /// A count field, bounded so corrupt files cannot request huge buffers.
    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > 4096 {
            return Err(Error::Format(format!("implausible {what} count {n} in checkpoint")));
        }
        Ok(n)
    }
}

fn decode(buf: &[u8]) -> Result<(ClassifierModel, Option<(Adam, usize)>)> {
    let mut r = Reader { buf, pos: 0 };
    if &r.take::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let seed = r.u64()?;
    let rank = r.count("input rank")?;
    let input_shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n_layers = r.count("layer")?;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8()?;
        let fields = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        specs.push(decode_spec(tag, fields)?);
    }
    let mut model = ClassifierModel::empty(input_shape, &specs, seed)
        .map_err(|e| Error::Format(format!("checkpoint layer table is invalid: {e}")))?;

    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let kind = layer.spec.kind();
        let count = r.count("tensor")?;
        let expected = layer.params.len() + layer.buffers.len();
        if count != expected {
            return Err(Error::Format(format!("layer {i} ({kind}): {count} tensors in checkpoint, expected {expected}")));
        }
        for t in layer.params.iter_mut().chain(layer.buffers.iter_mut()) {
            let rank = r.count("tensor rank")?;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != t.shape() {
                return Err(Error::Format(format!(
                    "layer {i} ({kind}): tensor shape {shape:?} in checkpoint, expected {:?}",
                    t.shape()
                )));
            }
            let values = r.f64s(t.len())?;
            t.data_mut().copy_from_slice(&values);
        }
    }

    let opt = match r.u8()? {
        0 => None,
        1 => {
            let config = AdamConfig { learning_rate: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
            let t = r.u64()?;
            let epoch = r.u64()? as usize;
            let mut adam = Adam::new(config);
            adam.t = t;
            if r.u8()? == 1 {
                let sizes: Vec<usize> = model.layers().iter().flat_map(|l| l.params.iter().map(Tensor::len)).collect();
                adam.m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<_>>()?;
                adam.v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<_>>()?;
            }
            Some((adam, epoch))
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f} in checkpoint"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
    }
    Ok((model, opt))
}

pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model, None))?;
    Ok(())
}

/// Model plus optimizer state and epoch counter, for resuming training.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode(&state.model, Some((&state.optimizer, state.epoch))))?;
    Ok(())
}

/// Loads the model from any checkpoint, ignoring optimizer state.
pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    Ok(decode(&fs::read(path)?)?.0)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    match decode(&fs::read(path)?)? {
        (model, Some((optimizer, epoch))) => Ok(TrainState { model, optimizer, epoch }),
        (_, None) => Err(Error::Format(format!("{} holds no optimizer state", path.display()))),
    }
}
