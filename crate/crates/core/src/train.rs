//! Losses, metrics, the optimizer and the training/evaluation loops.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::data::{augment_sample, derived_rng, Sample};
use crate::error::{Error, Result};
use crate::model::KmUnet;
use crate::params::{ParamVars, Params};
use crate::scalar::{sigmoid, Scalar};
use crate::tape::{BwdCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;

fn check_binary<T: Scalar>(target: &Tensor<T>, what: &str) -> Result<()> {
    if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::contract(format!("{what} must contain only 0 and 1")));
    }
    Ok(())
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Numerically stable binary cross entropy on logits:
/// `mean(max(x,0) - x t + ln(1 + e^-|x|))`. Never exponentiates a
/// positive number, so large logits of either sign are safe.
struct BceOp<T> {
    inv_n: T,
}

impl<T: Scalar> TapeOp<T> for BceOp<T> {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let g = ctx.out_grad()[0] * self.inv_n;
        let (x, t) = (ctx.parent(0), ctx.parent(1));
        if ctx.needs(x) {
            let mut gx = vec![T::zero(); ctx.val(x).numel()];
            for (i, (&xi, &ti)) in ctx.val(x).data().iter().zip(ctx.val(t).data()).enumerate() {
                gx[i] = g * (sigmoid(xi) - ti);
            }
            ctx.add(x, &gx);
        }
        if ctx.needs(t) {
            let mut gt = vec![T::zero(); ctx.val(t).numel()];
            for (i, &xi) in ctx.val(x).data().iter().enumerate() {
                gt[i] = -g * xi;
            }
            ctx.add(t, &gt);
        }
    }
}

/// Soft Dice on logits: `1 - (2 Σ p t + eps) / (Σ p + Σ t + eps)` with
/// `p = sigmoid(x)`.
struct DiceOp<T> {
    p: Vec<T>,
    num: T,
    den: T,
}

impl<T: Scalar> TapeOp<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "soft_dice"
    }

    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let g = ctx.out_grad()[0];
        let (x, t) = (ctx.parent(0), ctx.parent(1));
        let den2 = self.den * self.den;
        let two = T::c(2.0);
        if ctx.needs(x) {
            let mut gx = vec![T::zero(); self.p.len()];
            for (i, (&pi, &ti)) in self.p.iter().zip(ctx.val(t).data()).enumerate() {
                // d dice / d p_i, then chain through the sigmoid
                let ddp = -(two * ti * self.den - self.num) / den2;
                gx[i] = g * ddp * pi * (T::one() - pi);
            }
            ctx.add(x, &gx);
        }
        if ctx.needs(t) {
            let mut gt = vec![T::zero(); self.p.len()];
            for (i, &pi) in self.p.iter().enumerate() {
                gt[i] = -g * (two * pi * self.den - self.num) / den2;
            }
            ctx.add(t, &gt);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (x, t) = (self.value(logits), self.value(target));
        check_same_shape(x, t, "bce_with_logits")?;
        check_binary(t, "bce_with_logits target")?;
        let n = x.numel();
        if n == 0 {
            return Err(Error::dim("bce_with_logits on an empty tensor"));
        }
        let mut acc = T::zero();
        for (&xi, &ti) in x.data().iter().zip(t.data()) {
            let pos = if xi > T::zero() { xi } else { T::zero() };
            acc = acc + pos - xi * ti + (-xi.abs()).exp().ln_1p();
        }
        let inv_n = T::one() / T::c(n as f64);
        let out = Tensor::scalar(acc * inv_n);
        Ok(self.push(out, vec![logits, target], Box::new(BceOp { inv_n })))
    }

    pub fn soft_dice(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (x, t) = (self.value(logits), self.value(target));
        check_same_shape(x, t, "soft_dice")?;
        check_binary(t, "soft_dice target")?;
        if x.numel() == 0 {
            return Err(Error::dim("soft_dice on an empty tensor"));
        }
        let p: Vec<T> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let eps = T::c(DICE_EPS);
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut tsum = T::zero();
        for (&pi, &ti) in p.iter().zip(t.data()) {
            inter = inter + pi * ti;
            psum = psum + pi;
            tsum = tsum + ti;
        }
        let num = T::c(2.0) * inter + eps;
        let den = psum + tsum + eps;
        let out = Tensor::scalar(T::one() - num / den);
        Ok(self.push(out, vec![logits, target], Box::new(DiceOp { p, num, den })))
    }
}

/// Weighted sum of the two segmentation losses.
pub fn bce_dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: Var,
    w_bce: f64,
    w_dice: f64,
) -> Result<Var> {
    if w_bce < 0.0 || w_dice < 0.0 || (w_bce == 0.0 && w_dice == 0.0) {
        return Err(Error::config(format!(
            "loss weights must be nonnegative and not both zero, got bce={w_bce}, dice={w_dice}"
        )));
    }
    let b = tape.bce_with_logits(logits, target)?;
    let d = tape.soft_dice(logits, target)?;
    let bs = tape.scale(b, w_bce);
    let ds = tape.scale(d, w_dice);
    tape.add(bs, ds)
}

/// Hard mask from logits: positive logit means probability above one half.
pub fn binarize_logits<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(logits.shape().to_vec(), |i| {
        if logits.data()[i] > T::zero() {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Intersection, prediction and ground-truth pixel counts of two binary
/// masks of equal element count.
pub fn overlap_counts<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if pred.numel() != gt.numel() {
        return Err(Error::dim(format!(
            "masks have {} and {} elements",
            pred.numel(),
            gt.numel()
        )));
    }
    check_binary(pred, "prediction mask")?;
    check_binary(gt, "ground-truth mask")?;
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (pa, ga) = (a == T::one(), b == T::one());
        p += pa as usize;
        g += ga as usize;
        inter += (pa && ga) as usize;
    }
    Ok((inter, p, g))
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Dice/F1 score `2i / (p + g)`; two empty masks count as a perfect match.
pub fn f1<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// Half-cosine decay from `lr_max` at t=0 to `lr_min` at t=epochs.
pub fn cosine_lr(t: usize, epochs: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::config("schedule needs at least one epoch"));
    }
    if t > epochs {
        return Err(Error::contract(format!("schedule time {t} past the last epoch {epochs}")));
    }
    let phase = std::f64::consts::PI * t as f64 / epochs as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Adam with bias correction. Moment buffers are kept in f64 regardless
/// of the parameter scalar type.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(params: &Params<T>) -> Self {
        let zeros: Vec<Vec<f64>> =
            params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, m: zeros.clone(), v: zeros }
    }

    /// One update from the gradients held by `tape`. A parameter whose
    /// gradient contains a non-finite value aborts the run with an error
    /// naming it; a parameter without any gradient is treated as zero.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut Params<T>,
        tape: &Tape<T>,
        pv: &ParamVars,
        lr: f64,
    ) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (slot, id) in params.ids().enumerate() {
            if let Some(g) = tape.grad(pv.get(id)) {
                if g.iter().any(|v| !v.as_f64().is_finite()) {
                    return Err(Error::verify(format!(
                        "gradient for parameter {} is not finite",
                        params.name(id)
                    )));
                }
                let m = &mut self.m[slot];
                let v = &mut self.v[slot];
                let value = params.value_mut(id);
                for (i, gi) in g.iter().enumerate() {
                    let gi = gi.as_f64();
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                    value.data_mut()[i] = T::c(value.data_mut()[i].as_f64() - update);
                }
            } else {
                // zero gradient: moments still decay
                let m = &mut self.m[slot];
                let v = &mut self.v[slot];
                let value = params.value_mut(id);
                for i in 0..m.len() {
                    m[i] *= self.beta1;
                    v[i] *= self.beta2;
                    let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                    value.data_mut()[i] = T::c(value.data_mut()[i].as_f64() - update);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            lr_max: 1e-4,
            lr_min: 1e-5,
            seed: 42,
            w_bce: 1.0,
            w_dice: 1.0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.lr_max > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.lr_max {
            return Err(Error::config(format!(
                "need 0 < lr_min <= lr_max, got lr_min={}, lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if self.w_bce < 0.0 || self.w_dice < 0.0 || (self.w_bce == 0.0 && self.w_dice == 0.0) {
            return Err(Error::config("loss weights must be nonnegative and not both zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_f1: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    /// Parameter snapshot at the best validation IoU.
    pub best_params: Vec<(String, Tensor<T>)>,
    pub final_train_iou: f64,
    pub final_train_f1: f64,
}

/// Stacks equally-shaped samples into `[B,3,H,W]` images and `[B,1,H,W]`
/// masks.
pub fn stack_batch<T: Scalar>(samples: &[Sample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let ishape = first.image.shape();
    let mshape = first.mask.shape();
    let mut images = Vec::with_capacity(samples.len() * first.image.numel());
    let mut masks = Vec::with_capacity(samples.len() * first.mask.numel());
    for s in samples {
        if s.image.shape() != ishape || s.mask.shape() != mshape {
            return Err(Error::dim(format!(
                "batch mixes sample shapes: {:?} vs {:?}",
                s.image.shape(),
                ishape
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let mut ish = vec![samples.len()];
    ish.extend_from_slice(ishape);
    let mut msh = vec![samples.len()];
    msh.extend_from_slice(mshape);
    Ok((Tensor::new(ish, images)?, Tensor::new(msh, masks)?))
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_iou: f64,
    pub mean_f1: f64,
}

/// Per-image IoU and F1 at threshold one half, plus their means.
pub fn evaluate<T: Scalar>(model: &KmUnet<T>, samples: &[Sample<T>]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::config("nothing to evaluate"));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let mut shape = vec![1];
        shape.extend_from_slice(s.image.shape());
        let x = Tensor::new(shape, s.image.data().to_vec())?;
        let logits = model.infer(&x)?;
        let pred = binarize_logits(&logits);
        rows.push(EvalRow {
            id: s.id.clone(),
            iou: iou(&pred, &s.mask)?,
            f1: f1(&pred, &s.mask)?,
        });
    }
    let n = rows.len() as f64;
    let mean_iou = rows.iter().map(|r| r.iou).sum::<f64>() / n;
    let mean_f1 = rows.iter().map(|r| r.f1).sum::<f64>() / n;
    Ok(EvalReport { rows, mean_iou, mean_f1 })
}

/// Full training run: deterministic shuffling and augmentation derived
/// from the seed, cosine learning rate, Adam updates, per-epoch
/// validation, best-validation parameter snapshot.
pub fn train_loop<T: Scalar>(
    model: &mut KmUnet<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("training and validation sets must both be nonempty"));
    }
    let mut adam = Adam::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0;
    let mut best_val_iou = f64::NEG_INFINITY;
    let mut best_params = model.params.snapshot();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = derived_rng(&[cfg.seed, epoch as u64, 0x0001]);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.random_range(0..=i));
        }

        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for (k, &si) in chunk.iter().enumerate() {
                let s = &train[si];
                if cfg.augment {
                    let mut rng =
                        derived_rng(&[cfg.seed, epoch as u64, bi as u64, k as u64, 0x0002]);
                    batch.push(augment_sample(s, &mut rng)?);
                } else {
                    batch.push(s.clone());
                }
            }
            let (images, masks) = stack_batch(&batch)?;
            let mut tape = Tape::new();
            let pv = model.params.vars(&mut tape);
            let x = tape.constant(images);
            let t = tape.constant(masks);
            let logits = model.forward(&mut tape, &pv, x)?;
            let loss = bce_dice_loss(&mut tape, logits, t, cfg.w_bce, cfg.w_dice)?;
            let loss_val = tape.value(loss).data()[0].as_f64();
            if !loss_val.is_finite() {
                return Err(Error::verify(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            loss_sum += loss_val * chunk.len() as f64;
            tape.backward(loss)?;
            adam.step(&mut model.params, &tape, &pv, lr)?;
        }

        let report = evaluate(model, val)?;
        let stats = EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_iou: report.mean_iou,
            val_f1: report.mean_f1,
        };
        if stats.val_iou > best_val_iou {
            best_val_iou = stats.val_iou;
            best_epoch = epoch;
            best_params = model.params.snapshot();
        }
        progress(&stats);
        history.push(stats);
    }

    let train_report = evaluate(model, train)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_iou,
        best_params,
        final_train_iou: train_report.mean_iou,
        final_train_f1: train_report.mean_f1,
    })
}

/// History as comma-separated text with a header row.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,val_iou,val_f1\n");
    for s in history {
        let _ = writeln!(out, "{},{},{},{},{}", s.epoch, s.lr, s.train_loss, s.val_iou, s.val_f1);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
