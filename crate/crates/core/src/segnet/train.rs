//! Two-stage training: classifier pretraining, then end-to-end U-Net.
//!
//! A logical batch is processed in micro-batches whose gradients are summed
//! before a single Adam step, so memory stays bounded at any batch size and
//! the loss curve does not depend on the micro-batch split beyond float
//! summation order.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::checkpoint::{CheckpointMeta, NetworkParams};
use super::model::{Network, Stage};
use super::ops::{self, Tensor};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Held-out fraction when the caller does not supply a validation set.
    pub val_fraction: f64,
    /// Stop after this many epochs without a new best monitored loss.
    pub patience: Option<usize>,
    /// Stop once the epoch's training loss falls below this value.
    pub target_loss: Option<f64>,
    /// Samples per forward/backward pass inside a batch.
    pub micro_batch: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            lr: 1e-3,
            batch_size: 256,
            epochs: 60,
            seed: 0,
            val_fraction: 0.1,
            patience: Some(10),
            target_loss: None,
            micro_batch: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn classifier() -> Self {
        Self {
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn unet() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps > 0".into());
        }
        self.arch.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best monitored loss (validation if present).
    pub params: NetworkParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledCrop {
    pub image: GrayImage,
    pub void: bool,
}

#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: GrayImage,
    pub mask: BinaryMask,
}

/// Dense inputs/targets, one row per sample.
struct Data {
    n: usize,
    size: usize,
    inputs: Vec<f32>,
    targets: Vec<f32>,
    per_sample: usize,
}

impl Data {
    fn check_size(size: usize, img: &GrayImage, i: usize) -> Result<()> {
        if img.width() != size || img.height() != size {
            return Err(Error::DimensionMismatch(format!(
                "sample {i} is {}x{}, network expects {size}x{size}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn from_crops(items: &[&LabeledCrop], size: usize) -> Result<Self> {
        let mut d = Self::empty(size, 1, items.len());
        for (i, s) in items.iter().enumerate() {
            Self::check_size(size, &s.image, i)?;
            d.inputs.extend(s.image.pixels().iter().map(|&p| p as f32 / 255.0));
            d.targets.push(if s.void { 1.0 } else { 0.0 });
        }
        Ok(d)
    }

    fn from_seg(items: &[&SegSample], size: usize) -> Result<Self> {
        let mut d = Self::empty(size, size * size, items.len());
        for (i, s) in items.iter().enumerate() {
            Self::check_size(size, &s.image, i)?;
            if (s.mask.width(), s.mask.height()) != (size, size) {
                return Err(Error::DimensionMismatch(format!(
                    "mask {i} is {}x{}, crop is {size}x{size}",
                    s.mask.width(),
                    s.mask.height()
                )));
            }
            d.inputs.extend(s.image.pixels().iter().map(|&p| p as f32 / 255.0));
            d.targets
                .extend(s.mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        Ok(d)
    }

    fn empty(size: usize, per_sample: usize, n: usize) -> Self {
        Self {
            n,
            size,
            inputs: Vec::with_capacity(n * size * size),
            targets: Vec::with_capacity(n * per_sample),
            per_sample,
        }
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Vec<f32>) {
        let px = self.size * self.size;
        let mut x = Vec::with_capacity(idx.len() * px);
        let mut t = Vec::with_capacity(idx.len() * self.per_sample);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * px..(i + 1) * px]);
            t.extend_from_slice(&self.targets[i * self.per_sample..(i + 1) * self.per_sample]);
        }
        (Tensor::from_vec(idx.len(), self.size, self.size, 1, x), t)
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(net: &Network) -> Self {
        let zeros = || net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &[Vec<f32>], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let step = cfg.lr / bc1;
        for (((p, g), m), v) in net.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / ((*v / bc2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Mean per-element BCE of `net` over `data`.
fn mean_loss(net: &Network, data: &Data, micro: usize) -> f64 {
    let idx: Vec<usize> = (0..data.n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(micro) {
        let (x, t) = data.gather(chunk);
        let logits = net.forward_logits(&x);
        total += ops::bce_with_logits(&logits, &t, 0.0).0;
    }
    total / (data.n * data.per_sample) as f64
}

fn fit(
    mut net: Network,
    train: &Data,
    val: Option<&Data>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let _ftz = ops::FlushDenormals::new();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(&net);
    let mut grads: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut order: Vec<usize> = (0..train.n).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let scale = 1.0 / (batch.len() * train.per_sample) as f32;
            let mut batch_loss = 0.0;
            for micro in batch.chunks(cfg.micro_batch) {
                let (x, t) = train.gather(micro);
                batch_loss += net.accumulate_gradients(&x, &t, scale, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} training loss became non-finite at epoch {epoch}, batch {b}",
                    net.stage()
                )));
            }
            adam.step(&mut net, &grads, cfg);
            if let Some(p) = net.params().iter().find(|p| p.value.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "parameter {} became non-finite at epoch {epoch}, batch {b}",
                    p.name
                )));
            }
            sum += batch_loss;
        }
        let train_loss = sum / (train.n * train.per_sample) as f64;
        let val_loss = val.map(|v| mean_loss(&net, v, cfg.micro_batch));
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::debug!("{} epoch {epoch}: train {train_loss:.5} val {val_loss:?}", net.stage());
        on_epoch(&rec);
        history.push(rec);

        let monitored = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(l, _, _)| monitored < *l) {
            best = Some((monitored, epoch, net.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.target_loss.is_some_and(|t| train_loss < t) {
            break;
        }
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }
    let (_, best_epoch, best_net) = best.unwrap_or((f64::NAN, 0, net));
    let meta = CheckpointMeta::new(&best_net, best_epoch, cfg.seed, history.clone());
    Ok(TrainOutcome {
        params: NetworkParams {
            network: best_net,
            meta,
        },
        history,
        best_epoch,
    })
}

/// Seeded shuffle split; returns (train, validation) indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51_17)));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn check_classes(data: &[&LabeledCrop]) -> Result<()> {
    let voids = data.iter().filter(|s| s.void).count();
    if data.is_empty() {
        return Err(Error::Dataset("classifier training set is empty".into()));
    }
    if voids == 0 || voids == data.len() {
        return Err(Error::Dataset(format!(
            "classifier training set has a single class ({} void of {})",
            voids,
            data.len()
        )));
    }
    Ok(())
}

/// Trains the encoder classifier, holding out `cfg.val_fraction` for
/// validation.
pub fn train_classifier(
    data: &[LabeledCrop],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let (tr, va) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let tr: Vec<_> = tr.into_iter().map(|i| data[i].clone()).collect();
    let va: Vec<_> = va.into_iter().map(|i| data[i].clone()).collect();
    train_classifier_split(&tr, &va, cfg, on_epoch)
}

pub fn train_classifier_split(
    train: &[LabeledCrop],
    val: &[LabeledCrop],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tr: Vec<&LabeledCrop> = train.iter().collect();
    check_classes(&tr)?;
    let size = cfg.arch.input_size;
    let train = Data::from_crops(&tr, size)?;
    let val = (!val.is_empty())
        .then(|| Data::from_crops(&val.iter().collect::<Vec<_>>(), size))
        .transpose()?;
    let net = Network::classifier(&cfg.arch, cfg.seed)?;
    fit(net, &train, val.as_ref(), cfg, on_epoch)
}

/// Trains the U-Net end to end. With `encoder`, Conv1..ConvE start from its
/// weights (fine-tuned, not frozen).
pub fn train_unet(
    data: &[SegSample],
    cfg: &TrainConfig,
    encoder: Option<&Network>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let (tr, va) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let tr: Vec<_> = tr.into_iter().map(|i| data[i].clone()).collect();
    let va: Vec<_> = va.into_iter().map(|i| data[i].clone()).collect();
    train_unet_split(&tr, &va, cfg, encoder, on_epoch)
}

pub fn train_unet_split(
    train: &[SegSample],
    val: &[SegSample],
    cfg: &TrainConfig,
    encoder: Option<&Network>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("segmentation training set is empty".into()));
    }
    let size = cfg.arch.input_size;
    let train = Data::from_seg(&train.iter().collect::<Vec<_>>(), size)?;
    let val = (!val.is_empty())
        .then(|| Data::from_seg(&val.iter().collect::<Vec<_>>(), size))
        .transpose()?;
    let net = Network::unet(&cfg.arch, cfg.seed, encoder)?;
    fit(net, &train, val.as_ref(), cfg, on_epoch)
}

/// Mean BCE of a classifier over labeled crops.
pub fn classifier_loss(net: &Network, data: &[LabeledCrop]) -> Result<f64> {
    let d = Data::from_crops(&data.iter().collect::<Vec<_>>(), net.arch().input_size)?;
    Ok(mean_loss(net, &d, 16))
}

/// Mean per-pixel BCE of a U-Net over segmentation samples.
pub fn segmentation_loss(net: &Network, data: &[SegSample]) -> Result<f64> {
    if net.stage() != Stage::Unet {
        return Err(Error::InvalidArgument("segmentation_loss needs a U-Net".into()));
    }
    let d = Data::from_seg(&data.iter().collect::<Vec<_>>(), net.arch().input_size)?;
    Ok(mean_loss(net, &d, 16))
}
