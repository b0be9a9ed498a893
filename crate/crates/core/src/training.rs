//! Masked pretraining, next-frame fine-tuning and the optimizer.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Preset;
use crate::dataset::{DatasetHeader, Sample};
use crate::error::{Error, Result};
use crate::nn::{Freeze, Mode, Model, Module, Param, Real};
use crate::oracle::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeStage {
    Pretrain,
    Finetune,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup, then cosine decay to zero.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Fraction of frames masked during pretraining.
    pub alpha: f64,
    /// Supervise only the masked positions during pretraining.
    pub masked_only_loss: bool,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub schedule: LrSchedule,
    /// Warmup length as a fraction of the stage's total steps.
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub freeze_stage: FreezeStage,
    /// Decoder blocks frozen together with the CNN.
    pub frozen_blocks: usize,
    /// Seeds weight init, shuffling, masking and dropout.
    pub seed: u64,
}

impl TrainingConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            alpha: 0.3,
            masked_only_loss: false,
            pretrain_epochs: 12,
            finetune_epochs: 12,
            batch_size: 64,
            eval_batch_size: 256,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-4,
            schedule: LrSchedule::Cosine,
            warmup_fraction: 0.05,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            freeze_stage: FreezeStage::Finetune,
            frozen_blocks: 1,
            seed: 1,
        };
        match preset {
            Preset::Desk => base,
            Preset::Paper => Self {
                batch_size: 256,
                pretrain_epochs: 50,
                finetune_epochs: 50,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, v) in [("pretrain_lr", self.pretrain_lr), ("finetune_lr", self.finetune_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction outside [0, 1]".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam constants".into());
        }
        Ok(())
    }

    /// Freeze policy of a stage under `freeze_stage`.
    pub fn freeze_for(&self, stage: Stage) -> Freeze {
        let on = matches!(
            (self.freeze_stage, stage),
            (FreezeStage::Pretrain, Stage::Pretrain) | (FreezeStage::Finetune, Stage::Finetune)
        );
        if on {
            Freeze::prefix(self.frozen_blocks)
        } else {
            Freeze::none()
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    /// Next-frame training from scratch with nothing frozen.
    Direct,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Direct => "direct",
        }
    }

    fn rng_stream(self) -> u64 {
        match self {
            Stage::Pretrain => 10,
            Stage::Finetune => 11,
            Stage::Direct => 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Zero,
    Random,
    Keep,
}

/// Which frames were masked and how.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub batch: usize,
    pub seq: usize,
    /// `batch x seq`, `None` for unmasked positions.
    pub actions: Vec<Option<MaskAction>>,
}

impl MaskPlan {
    pub fn masked(&self) -> Vec<bool> {
        self.actions.iter().map(Option::is_some).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.actions.iter().filter(|a| a.is_some()).count()
    }
}

/// Masks each frame independently with probability `alpha`; a masked frame
/// is zeroed (80%), replaced by the same slot of another sample in the
/// batch (10%) or left as is (10%).
pub fn apply_mask<T: Real, R: Rng + ?Sized>(
    x: &[T],
    batch: usize,
    seq: usize,
    frame_len: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<T>, MaskPlan)> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("mask ratio {alpha} outside [0, 1)")));
    }
    if x.len() != batch * seq * frame_len {
        return Err(Error::DimensionMismatch("mask input size".into()));
    }
    let mut out = x.to_vec();
    let mut actions = vec![None; batch * seq];
    if alpha == 0.0 {
        return Ok((out, MaskPlan { batch, seq, actions }));
    }
    for b in 0..batch {
        for p in 0..seq {
            if rng.random::<f64>() >= alpha {
                continue;
            }
            let u = rng.random::<f64>();
            let dst = (b * seq + p) * frame_len;
            let action = if u < 0.8 {
                out[dst..dst + frame_len].iter_mut().for_each(|v| *v = T::zero());
                MaskAction::Zero
            } else if u < 0.9 {
                let other = if batch > 1 {
                    let j = rng.random_range(0..batch - 1);
                    if j >= b {
                        j + 1
                    } else {
                        j
                    }
                } else {
                    b
                };
                let src = (other * seq + p) * frame_len;
                out[dst..dst + frame_len].copy_from_slice(&x[src..src + frame_len]);
                MaskAction::Random
            } else {
                MaskAction::Keep
            };
            actions[b * seq + p] = Some(action);
        }
    }
    Ok((out, MaskPlan { batch, seq, actions }))
}

/// Mean loss and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grad: Vec<T>,
}

/// Mean cross-entropy over the rows with `weight[row]` set; gradient of the
/// mean is written to the selected rows.
fn cross_entropy<T: Real>(
    logits: &[T],
    classes: usize,
    targets: &[(usize, u32)],
    rows: usize,
) -> Result<LossOutput<T>> {
    let mut grad = vec![T::zero(); rows * classes];
    if targets.is_empty() {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let scale = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    for &(row, label) in targets {
        let label = label as usize;
        if label >= classes {
            return Err(Error::OutOfRange {
                what: "label",
                index: label,
                bound: classes,
            });
        }
        let z = &logits[row * classes..(row + 1) * classes];
        let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - z[label].as_f64();
        let g = &mut grad[row * classes..(row + 1) * classes];
        for (c, (gv, zv)) in g.iter_mut().zip(z).enumerate() {
            let p = (zv.as_f64() - lse).exp();
            *gv = T::of(scale * (p - if c == label { 1.0 } else { 0.0 }));
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
    })
}

/// Cross-entropy averaged over all `batch x seq` positions, or over the
/// positions flagged in `selected`.
pub fn pretrain_loss<T: Real>(
    logits: &[T],
    labels: &[u32],
    classes: usize,
    selected: Option<&[bool]>,
) -> Result<LossOutput<T>> {
    let rows = labels.len();
    if logits.len() != rows * classes || selected.is_some_and(|s| s.len() != rows) {
        return Err(Error::DimensionMismatch("pretrain loss shapes".into()));
    }
    let targets: Vec<(usize, u32)> = labels
        .iter()
        .enumerate()
        .filter(|&(i, _)| selected.is_none_or(|s| s[i]))
        .map(|(i, &l)| (i, l))
        .collect();
    cross_entropy(logits, classes, &targets, rows)
}

/// Cross-entropy of the last-position logits against the next-frame labels.
pub fn finetune_loss<T: Real>(logits: &[T], next_labels: &[u32], seq: usize, classes: usize) -> Result<LossOutput<T>> {
    let batch = next_labels.len();
    if logits.len() != batch * seq * classes || seq == 0 {
        return Err(Error::DimensionMismatch("finetune loss shapes".into()));
    }
    let targets: Vec<(usize, u32)> = next_labels
        .iter()
        .enumerate()
        .map(|(b, &l)| (b * seq + seq - 1, l))
        .collect();
    cross_entropy(logits, classes, &targets, batch * seq)
}

/// Adaptive-moment optimizer with bias correction and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, clip: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            clip,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip)
    }

    /// Updates `params` from their gradients and returns the gradient norm
    /// before clipping. The parameter list must keep its order across calls.
    pub fn update(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<f64> {
        self.step += 1;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::DimensionMismatch(
                "optimizer state does not match the parameters".into(),
            ));
        }
        let mut sq = 0.0;
        for p in params.iter() {
            for g in &p.grad {
                let g = g.as_f64();
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                        step: self.step,
                    });
                }
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let sc = T::of(scale);
        let step_size = T::of(lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i] * sc;
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
        Ok(norm)
    }

    /// Steps every parameter of `model` allowed by `freeze`; frozen
    /// parameters are neither read nor written.
    pub fn step_model(&mut self, model: &mut Model<T>, lr: f64) -> Result<f64> {
        let freeze = model.freeze;
        let mut params: Vec<&mut Param<T>> = model
            .params_mut()
            .into_iter()
            .filter(|p| freeze.allows(&p.name))
            .collect();
        self.update(&mut params, lr)
    }
}

/// Learning rate at `step` of `total` steps.
pub fn lr_at(schedule: LrSchedule, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            if step < warmup {
                base * (step + 1) as f64 / warmup as f64
            } else {
                let span = total.saturating_sub(warmup).max(1) as f64;
                let t = ((step - warmup) as f64 / span).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Model inputs and labels of a set of samples, laid out contiguously.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSet {
    pub len: usize,
    pub context: usize,
    pub frame_len: usize,
    /// `len x P x frame_len`
    pub inputs: Vec<f32>,
    /// `len x (P + 1)`
    pub labels: Vec<u32>,
}

impl TrainSet {
    pub fn from_samples(header: &DatasetHeader, samples: &[Sample]) -> Result<Self> {
        let p = header.tensor_shape[0];
        let frame_len = header.frame_len();
        let mut inputs = Vec::with_capacity(samples.len() * p * frame_len);
        let mut labels = Vec::with_capacity(samples.len() * (p + 1));
        for s in samples {
            if s.pilots.len() != p * frame_len || s.labels.len() != p + 1 {
                return Err(Error::DimensionMismatch(format!(
                    "sample {} does not match the header",
                    s.index
                )));
            }
            inputs.extend_from_slice(&s.pilots);
            labels.extend_from_slice(&s.labels);
        }
        Ok(Self {
            len: samples.len(),
            context: p,
            frame_len,
            inputs,
            labels,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn sample_len(&self) -> usize {
        self.context * self.frame_len
    }

    /// Gathers inputs, per-frame labels `0..P` and next-frame labels.
    pub fn gather<T: Real>(&self, idx: &[usize]) -> (Vec<T>, Vec<u32>, Vec<u32>) {
        let sl = self.sample_len();
        let p = self.context;
        let mut x = Vec::with_capacity(idx.len() * sl);
        let mut frame_labels = Vec::with_capacity(idx.len() * p);
        let mut next = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend(self.inputs[i * sl..(i + 1) * sl].iter().map(|&v| T::of(v as f64)));
            let l = &self.labels[i * (p + 1)..(i + 1) * (p + 1)];
            frame_labels.extend_from_slice(&l[..p]);
            next.push(l[p]);
        }
        (x, frame_labels, next)
    }

    pub fn next_labels(&self) -> Vec<u32> {
        let p = self.context;
        (0..self.len).map(|i| self.labels[i * (p + 1) + p]).collect()
    }

    fn check(&self, model: &Model<impl Real>) -> Result<()> {
        let d = &model.dims;
        if self.context != d.context || self.frame_len != d.frame_len() {
            return Err(Error::DimensionMismatch(format!(
                "dataset has context {} and frame size {}, model expects {} and {}",
                self.context,
                self.frame_len,
                d.context,
                d.frame_len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= d.num_classes) {
            return Err(Error::OutOfRange {
                what: "label",
                index: l as usize,
                bound: d.num_classes,
            });
        }
        Ok(())
    }
}

/// Last-position logits of every sample, computed in evaluation mode.
pub fn predict_logits<T: Real>(model: &mut Model<T>, data: &TrainSet, batch_size: usize) -> Result<Vec<T>> {
    data.check(model)?;
    let classes = model.dims.num_classes;
    let p = data.context;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(data.len * classes);
    let idx: Vec<usize> = (0..data.len).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _, _) = data.gather::<T>(chunk);
        let logits = model.forward(&x, chunk.len(), p, Mode::Eval, &mut rng)?;
        for b in 0..chunk.len() {
            let row = b * p + p - 1;
            out.extend_from_slice(&logits[row * classes..(row + 1) * classes]);
        }
    }
    Ok(out)
}

/// Loss and accuracy of one pass over a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Evaluation-mode loss and accuracy of a stage's objective on `data`.
pub fn validate<T: Real>(model: &mut Model<T>, data: &TrainSet, stage: Stage, batch_size: usize) -> Result<(f64, f64)> {
    data.check(model)?;
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let classes = model.dims.num_classes;
    let p = data.context;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut correct, mut count) = (0.0, 0usize, 0usize);
    let idx: Vec<usize> = (0..data.len).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, frame_labels, next) = data.gather::<T>(chunk);
        let logits = model.forward(&x, chunk.len(), p, Mode::Eval, &mut rng)?;
        let (l, rows): (f64, Vec<(usize, u32)>) = match stage {
            Stage::Pretrain => (
                pretrain_loss(&logits, &frame_labels, classes, None)?.loss,
                frame_labels.iter().copied().enumerate().collect(),
            ),
            _ => (
                finetune_loss(&logits, &next, p, classes)?.loss,
                next.iter().enumerate().map(|(b, &l)| (b * p + p - 1, l)).collect(),
            ),
        };
        loss += l * rows.len() as f64;
        count += rows.len();
        correct += rows
            .iter()
            .filter(|&&(r, lab)| argmax(&logits[r * classes..(r + 1) * classes]) == lab as usize)
            .count();
    }
    Ok((loss / count as f64, correct as f64 / count as f64))
}

/// Result of a training stage.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Weights of the epoch with the best validation accuracy.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

impl<T> TrainOutcome<T> {
    /// Validation accuracy per epoch.
    pub fn val_accuracy(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == Split::Val)
            .map(|r| r.accuracy)
            .collect()
    }

    /// First epoch (1-based) whose validation accuracy reaches `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.history
            .iter()
            .find(|r| r.split == Split::Val && r.accuracy >= threshold)
            .map(|r| r.epoch)
    }
}

/// Trains `model` for one stage. Pretraining masks frames and supervises
/// per-frame labels; the other stages supervise the next-frame label at the
/// last position. The freeze policy comes from `cfg` for the stage.
pub fn train_stage<T: Real>(
    mut model: Model<T>,
    train: &TrainSet,
    val: &TrainSet,
    cfg: &TrainingConfig,
    stage: Stage,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    train.check(&model)?;
    val.check(&model)?;
    model.freeze = match stage {
        Stage::Direct => Freeze::none(),
        s => cfg.freeze_for(s),
    };
    let (epochs, base_lr) = match stage {
        Stage::Pretrain => (cfg.pretrain_epochs, cfg.pretrain_lr),
        _ => (cfg.finetune_epochs, cfg.finetune_lr),
    };
    let classes = model.dims.num_classes;
    let p = train.context;
    let bs = cfg.batch_size;
    let steps_per_epoch = train.len.div_ceil(bs);
    let total = steps_per_epoch * epochs;
    let warmup = (cfg.warmup_fraction * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stage.rng_stream());
    let mut opt = Adam::<T>::from_config(cfg);
    let mut order: Vec<usize> = (0..train.len).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, Model<T>)> = None;
    let mut step = 0usize;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut rows_seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(bs) {
            let (x, frame_labels, next) = train.gather::<T>(chunk);
            let b = chunk.len();
            let out = match stage {
                Stage::Pretrain => {
                    let (xm, plan) = apply_mask(&x, b, p, train.frame_len, cfg.alpha, &mut rng)?;
                    let logits = model.forward(&xm, b, p, Mode::Train, &mut rng)?;
                    let masked = plan.masked();
                    let sel = cfg.masked_only_loss.then_some(masked.as_slice());
                    let out = pretrain_loss(&logits, &frame_labels, classes, sel)?;
                    let rows: Vec<(usize, u32)> = frame_labels
                        .iter()
                        .copied()
                        .enumerate()
                        .filter(|&(i, _)| sel.is_none_or(|s| s[i]))
                        .collect();
                    (out, logits, rows)
                }
                _ => {
                    let logits = model.forward(&x, b, p, Mode::Train, &mut rng)?;
                    let out = finetune_loss(&logits, &next, p, classes)?;
                    let rows = next.iter().enumerate().map(|(i, &l)| (i * p + p - 1, l)).collect();
                    (out, logits, rows)
                }
            };
            let (loss, logits, rows) = out;
            model.zero_grad();
            model.backward(&loss.grad)?;
            let lr = lr_at(cfg.schedule, base_lr, step, total, warmup);
            opt.step_model(&mut model, lr)?;
            step += 1;
            loss_sum += loss.loss * rows.len() as f64;
            rows_seen += rows.len();
            correct += rows
                .iter()
                .filter(|&&(r, lab)| argmax(&logits[r * classes..(r + 1) * classes]) == lab as usize)
                .count();
        }
        let denom = rows_seen.max(1) as f64;
        history.push(EpochRecord {
            stage,
            epoch,
            split: Split::Train,
            loss: loss_sum / denom,
            accuracy: correct as f64 / denom,
        });
        let (vl, va) = validate(&mut model, val, stage, cfg.eval_batch_size)?;
        history.push(EpochRecord {
            stage,
            epoch,
            split: Split::Val,
            loss: vl,
            accuracy: va,
        });
        info!(
            "{} epoch {epoch}/{epochs}: train loss {:.4}, val loss {vl:.4}, val acc {va:.4}",
            stage.name(),
            loss_sum / denom
        );
        let better = best
            .as_ref()
            .is_none_or(|&(ba, bl, _, _)| va > ba || (va == ba && vl < bl));
        if better {
            best = Some((va, vl, epoch, model.clone()));
        }
    }
    let (best_model, best_epoch) = match best {
        Some((_, _, e, m)) => (m, e),
        None => (model, 0),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        history,
        steps: opt.step,
    })
}

pub fn pretrain<T: Real>(
    model: Model<T>,
    train: &TrainSet,
    val: &TrainSet,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<T>> {
    train_stage(model, train, val, cfg, Stage::Pretrain)
}

pub fn finetune<T: Real>(
    model: Model<T>,
    train: &TrainSet,
    val: &TrainSet,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<T>> {
    train_stage(model, train, val, cfg, Stage::Finetune)
}

pub fn train_direct<T: Real>(
    model: Model<T>,
    train: &TrainSet,
    val: &TrainSet,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<T>> {
    train_stage(model, train, val, cfg, Stage::Direct)
}

/// Writes epoch records as CSV with columns stage, epoch, split, loss,
/// accuracy.
pub fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    crate::binio::write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["stage", "epoch", "split", "loss", "accuracy"])?;
        for r in records {
            csv.write_record([
                r.stage.name().to_string(),
                r.epoch.to_string(),
                match r.split {
                    Split::Train => "train".into(),
                    Split::Val => "val".into(),
                },
                format!("{:e}", r.loss),
                format!("{:e}", r.accuracy),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })
}
