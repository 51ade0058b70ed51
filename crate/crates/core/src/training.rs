//! Loss, optimizer and training loops.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{json_file, Error, Result};
use crate::fusion::{self, ViewModels};
use crate::metrics::Overlap;
use crate::models::{Model, ModelSpec, Weights};
use crate::nn::{self, Mode, Scalar, Tensor};
use crate::phantom::LabeledVolume;
use crate::volume::{reslice, rescale_intensity, resize_slice, Axis, Image, ResizeMode};

/// Guard on the Dice denominator for slices where prediction and target are both empty.
pub const DICE_EPS: f64 = 1e-7;

/// Momentum of batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.9;

/// Optimizer and schedule settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub n_epoch: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            batch_size: 16,
            n_epoch: 50,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidValue(format!("invalid hyperparameters {self:?}")))
        }
    }
}

/// Dice-plus-MSE loss and its gradient with respect to `pred`:
///
/// `L = −2·Σ ŝs / max(Σ(ŝ + s), ε) + (1/N)·Σ(ŝ − s)²`
pub fn loss_and_grad<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    debug_assert_eq!(pred.len(), target.len());
    let n = T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let mut inter = T::zero();
    let mut denom = T::zero();
    let mut sq = T::zero();
    for (&p, &s) in pred.iter().zip(target) {
        inter = inter + p * s;
        denom = denom + p + s;
        sq = sq + (p - s) * (p - s);
    }
    let eps = T::lit(DICE_EPS);
    let guarded = denom > eps;
    let d = if guarded { denom } else { eps };
    let loss = -two * inter / d + sq / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &s)| {
            let dice = if guarded {
                -two * (s * d - inter) / (d * d)
            } else {
                -two * s / d
            };
            dice + two * (p - s) / n
        })
        .collect();
    (loss, grad)
}

/// Loss between a probability map and a binary target of the same shape.
pub fn combined_loss(pred: &Image, target: &Image) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidValue(format!("prediction {v} outside [0, 1]")));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidValue(format!("target {v} is not binary")));
    }
    let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let s: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    Ok(loss_and_grad(&p, &s).0)
}

/// Bias-corrected Adam over the trainable parameter slots.
#[derive(Clone, Debug)]
pub struct Adam {
    hp: HyperParams,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(hp: HyperParams, slots: &[Vec<f32>]) -> Self {
        let zeros = || slots.iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            hp,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update to every slot flagged in `trainable`.
    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], trainable: &[bool]) {
        self.step += 1;
        let (b1, b2) = (self.hp.beta1, self.hp.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.hp.alpha, self.hp.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !trainable[i] {
                continue;
            }
            for ((w, &gi), (m, v)) in p
                .iter_mut()
                .zip(g)
                .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
            {
                let gi = gi as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * gi;
                let vn = b2 * *v as f64 + (1.0 - b2) * gi * gi;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Input/target pairs for one network, all of one spatial shape.
#[derive(Clone, Debug, Default)]
pub struct SliceDataset {
    shape: (usize, usize),
    channels: usize,
    inputs: Vec<Vec<f32>>,
    targets: Vec<Vec<f32>>,
}

impl SliceDataset {
    pub fn new(shape: (usize, usize), channels: usize) -> Self {
        Self {
            shape,
            channels,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// Adds one sample; `input` holds `channels` planes of `shape`.
    pub fn push(&mut self, input: Vec<f32>, target: Image) -> Result<()> {
        let plane = self.shape.0 * self.shape.1;
        if input.len() != self.channels * plane || target.shape() != self.shape {
            return Err(Error::Shape(format!(
                "sample does not match dataset shape {:?} x {} channels",
                self.shape, self.channels
            )));
        }
        self.inputs.push(input);
        self.targets.push(target.into_data());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn target(&self, i: usize) -> &[f32] {
        &self.targets[i]
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<&[f32]>) {
        let (h, w) = self.shape;
        let mut data = Vec::with_capacity(idx.len() * self.channels * h * w);
        for &i in idx {
            data.extend_from_slice(&self.inputs[i]);
        }
        let x = Tensor::from_vec([idx.len(), self.channels, h, w], data)
            .expect("batch sized by construction");
        (x, idx.iter().map(|&i| self.targets[i].as_slice()).collect())
    }
}

/// Network input for one slice: resized to `shape` and rescaled to [-1, 1].
pub fn preprocess_slice(slice: &Image, shape: (usize, usize)) -> Result<Image> {
    Ok(rescale_intensity(&resize_slice(slice, shape, ResizeMode::Continuous)?))
}

/// Slices of every volume along `axis`, prepared for a network taking `shape` inputs.
pub fn view_dataset(volumes: &[LabeledVolume], axis: Axis, shape: (usize, usize)) -> Result<SliceDataset> {
    let mut ds = SliceDataset::new(shape, 1);
    for lv in volumes {
        let images = reslice(&lv.image, axis);
        let masks = reslice(&lv.wall_mask, axis);
        for (img, mask) in images.slices().iter().zip(masks.slices()) {
            let x = preprocess_slice(img, shape)?;
            let y = resize_slice(mask, shape, ResizeMode::Label)?;
            ds.push(x.into_data(), y)?;
        }
    }
    Ok(ds)
}

/// Fusion-network training pairs: the three axial-oriented binary per-view
/// masks of each training volume, and the axial ground-truth slice.
pub fn san_dataset(
    volumes: &[LabeledVolume],
    views: &ViewModels,
    threshold: f32,
    shape: (usize, usize),
) -> Result<SliceDataset> {
    let mut ds = SliceDataset::new(shape, 3);
    for lv in volumes {
        let masks = fusion::per_view_masks(&lv.image, views, threshold)?;
        let inputs = fusion::san_inputs(&masks, shape)?;
        let truth = reslice(&lv.wall_mask, Axis::Axial);
        for (x, y) in inputs.into_iter().zip(truth.slices()) {
            ds.push(x, resize_slice(y, shape, ResizeMode::Label)?)?;
        }
    }
    Ok(ds)
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// Pooled-voxel DSC on the validation set, when one was given.
    pub val_dsc: Vec<Option<f64>>,
    /// Cumulative wall-clock seconds at the end of each epoch.
    pub elapsed_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn total_seconds(&self) -> f64 {
        self.elapsed_seconds.last().copied().unwrap_or(0.0)
    }
}

/// Optional behaviour of [`train_model`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Writes `<dir>/epoch_<k>/` (weights, spec, `history.json`) after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Keep only the newest this-many epoch checkpoints.
    pub keep_checkpoints: Option<usize>,
    pub validation: Option<&'a SliceDataset>,
}

/// Mini-batch Adam on the mean per-slice loss, reshuffled every epoch.
/// Initialization and shuffling are both derived from `seed`.
pub fn train_model(
    spec: &ModelSpec,
    data: &SliceDataset,
    hp: &HyperParams,
    seed: u64,
    options: &TrainOptions<'_>,
) -> Result<(Weights, TrainHistory)> {
    hp.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition(format!("{}: training set is empty", spec.name)));
    }
    if data.shape() != spec.spatial_shape() || data.channels() != spec.in_channels() {
        return Err(Error::Shape(format!(
            "{} takes {:?} inputs, dataset has {:?} x {}",
            spec.name,
            spec.input_shape,
            data.shape(),
            data.channels()
        )));
    }

    let mut weights = Weights::init(spec, seed);
    let infos = spec.params();
    let trainable: Vec<bool> = infos.iter().map(|p| p.role.trainable()).collect();
    let norm_slots: Vec<(usize, usize)> = infos
        .iter()
        .enumerate()
        .filter(|(_, p)| p.role == nn::ParamRole::RunningMean)
        .map(|(i, p)| (p.node, i))
        .collect();
    let mut adam = Adam::new(*hp, weights.slots());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    let started = Instant::now();

    for epoch in 1..=hp.n_epoch {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (b, idx) in order.chunks(hp.batch_size).enumerate() {
            let (x, targets) = data.batch(idx);
            let fwd = nn::forward(&spec.layers, weights.slots(), x, Mode::Train)?;
            let out = fwd.output();
            let plane = out.plane();
            let scale = 1.0 / idx.len() as f32;
            let mut grad = Vec::with_capacity(out.data().len());
            let mut batch_loss = 0.0f64;
            for (k, target) in targets.iter().enumerate() {
                let (l, g) = loss_and_grad(&out.data()[k * plane..(k + 1) * plane], target);
                batch_loss += l as f64;
                grad.extend(g.into_iter().map(|v| v * scale));
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            let grad = Tensor::from_vec(out.shape(), grad)?;
            let grads = nn::backward(&spec.layers, weights.slots(), &fwd, grad)?;
            adam.step(weights.slots_mut(), &grads, &trainable);
            update_running_stats(weights.slots_mut(), &fwd, &norm_slots);
        }
        let epoch_loss = loss_sum / data.len() as f64;
        history.train_loss.push(epoch_loss);
        let val = match options.validation {
            Some(v) => Some(pooled_dsc(&Model::new(spec.clone(), weights.clone())?, v, 0.5)?),
            None => None,
        };
        history.val_dsc.push(val);
        history.elapsed_seconds.push(started.elapsed().as_secs_f64());
        weights.meta.epochs_completed = epoch;
        weights.meta.final_loss = Some(epoch_loss);
        log::info!(
            "{} epoch {epoch}/{}: loss {epoch_loss:.5}{}",
            spec.name,
            hp.n_epoch,
            val.map(|d| format!(", val DSC {d:.4}")).unwrap_or_default()
        );
        if let Some(dir) = &options.checkpoint_dir {
            write_checkpoint(dir, epoch, spec, &weights, &history, options.keep_checkpoints)?;
        }
    }
    Ok((weights, history))
}

fn update_running_stats(slots: &mut [Vec<f32>], fwd: &nn::Forward<f32>, norm_slots: &[(usize, usize)]) {
    for (node, mean, var) in fwd.batch_statistics() {
        let Some(&(_, slot)) = norm_slots.iter().find(|(n, _)| *n == node) else {
            continue;
        };
        for (r, &m) in slots[slot].iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in slots[slot + 1].iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

fn write_checkpoint(
    dir: &Path,
    epoch: usize,
    spec: &ModelSpec,
    weights: &Weights,
    history: &TrainHistory,
    keep: Option<usize>,
) -> Result<()> {
    let at = dir.join(format!("epoch_{epoch}"));
    Model::new(spec.clone(), weights.clone())?.save(&at)?;
    json_file::write(&at.join("history.json"), history)?;
    if let Some(keep) = keep {
        if epoch > keep {
            let old = dir.join(format!("epoch_{}", epoch - keep));
            if old.exists() {
                std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
    }
    Ok(())
}

/// DSC over all voxels of a dataset after thresholding the model output.
pub fn pooled_dsc(model: &Model, data: &SliceDataset, threshold: f32) -> Result<f64> {
    let mut total = Overlap::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(8) {
        let (x, targets) = data.batch(chunk);
        let out = model.predict(x)?;
        let plane = out.plane();
        for (k, t) in targets.iter().enumerate() {
            let mask: Vec<f32> = out.data()[k * plane..(k + 1) * plane]
                .iter()
                .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
                .collect();
            let o = Overlap::count(&mask, t)?;
            total.intersection += o.intersection;
            total.pred += o.pred;
            total.truth += o.truth;
        }
    }
    Ok(total.dsc())
}

/// Trains the fusion network on the outputs of frozen per-view U-Nets.
pub fn train_san(
    views: &ViewModels,
    train_volumes: &[LabeledVolume],
    san_spec: &ModelSpec,
    hp: &HyperParams,
    seed: u64,
    options: &TrainOptions<'_>,
) -> Result<(Weights, TrainHistory)> {
    if train_volumes.is_empty() {
        return Err(Error::Precondition("fusion training needs at least one volume".into()));
    }
    let data = san_dataset(
        train_volumes,
        views,
        fusion::DEFAULT_THRESHOLD,
        san_spec.spatial_shape(),
    )?;
    train_model(san_spec, &data, hp, seed, options)
}
