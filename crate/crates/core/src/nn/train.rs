use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, save_checkpoint, Adam, AdamConfig, ClassifierModel, Pass, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 128,
            epochs: 200,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Model plus optimizer and the number of finished epochs; enough to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ClassifierModel,
    pub optimizer: Adam,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: ClassifierModel, cfg: &TrainConfig) -> Self {
        Self { model, optimizer: Adam::new(cfg.adam()), epoch: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + purpose);
    rng
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs`. Every epoch reshuffles the
/// data and draws dropout masks from streams keyed by the epoch number, so a
/// run resumed from a checkpoint follows the uninterrupted one exactly.
pub fn train(
    state: &mut TrainState,
    images: &Tensor,
    labels: &[usize],
    validation: Option<(&Tensor, &[usize])>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Control,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} images", labels.len())));
    }
    let k = state.model.num_classes();
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!("label {l} out of range for {k} classes")));
    }
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
        let mut dropout_rng = epoch_rng(cfg.seed, epoch, 1);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = images.gather_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let out = state.model.backprop(&x, &y, Pass::Training(&mut dropout_rng), false)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b + 1 });
            }
            loss_sum += out.loss * idx.len() as f64;
            correct += y.iter().enumerate().filter(|(i, &l)| argmax(out.probs.row(*i)) == l).count();
            state.optimizer.step(&mut state.model, &out.grads)?;
        }
        state.epoch += 1;
        let val_acc = match validation {
            Some((vx, vy)) => Some(accuracy(&state.model.predict(vx)?.0, vy)),
            None => None,
        };
        let record = EpochRecord { epoch: state.epoch, loss: loss_sum / n as f64, train_acc: correct as f64 / n as f64, val_acc };
        history.push(record);
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every) {
                fs::create_dir_all(dir)?;
                save_checkpoint(state, &dir.join(format!("epoch_{:04}.fdnn", state.epoch)))?;
            }
        }
        if on_epoch(state, &record) == Control::Stop {
            break;
        }
    }
    Ok(history)
}

pub(crate) fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss,train_acc,val_acc\n");
    for r in history {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.train_acc, val).expect("write to string");
    }
    fs::write(path, out)?;
    Ok(())
}
