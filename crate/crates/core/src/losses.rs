//! Training objectives as differentiable scalars on a [`Tape`].
//!
//! Batched losses take per-row weights (`[B]`): a row contributes with its
//! weight, so masking a row out is a zero weight and a mean over the included
//! rows is a weight of `1 / count`. Per-step terms are averaged over the
//! `T - 1` encoded steps.

use crate::error::{Error, Result};
use crate::model::{Pose, PROB_FLOOR, RAD_PER_DEG};
use crate::numcore::{Tape, Tensor, Var};

/// Values of every objective for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub reg: f64,
    pub adv: f64,
    pub gen: f64,
    pub dis: f64,
    pub cls: f64,
    pub mon: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.reg, self.adv, self.gen, self.dis, self.cls, self.mon].iter().all(|v| v.is_finite())
    }
}

/// Scalar pose distance: mean squared position error plus `1 - cos` of each
/// angle difference.
pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    let pos: f64 = a.position.iter().zip(&b.position).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 3.0;
    let rot: f64 = a.rotation.iter().zip(&b.rotation).map(|(x, y)| 1.0 - ((x - y) * RAD_PER_DEG).cos()).sum();
    pos + rot
}

/// Row-wise pose distance of two `[B, 6]` poses, giving `[B, 1]`.
pub fn pose_distance_rows(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let diff = tape.sub(pred, truth)?;
    let dp = tape.slice(diff, 0, 3)?;
    let sq = tape.mul(dp, dp)?;
    let third = tape.constant(Tensor::full(&[3, 1], 1.0 / 3.0));
    let pos = tape.matmul(sq, third)?;
    let dr = tape.slice(diff, 3, 3)?;
    let rad = tape.scale(dr, RAD_PER_DEG)?;
    let c = tape.cos(rad)?;
    let neg = tape.scale(c, -1.0)?;
    let one_minus = tape.offset(neg, 1.0)?;
    let ones = tape.constant(Tensor::full(&[3, 1], 1.0));
    let rot = tape.matmul(one_minus, ones)?;
    Ok(tape.add(pos, rot)?)
}

fn check_weights(tape: &Tape, rows: Var, weights: &Tensor) -> Result<()> {
    let b = tape.shape(rows)[0];
    if weights.len() != b {
        return Err(Error::Invalid(format!("{} row weights for a batch of {b}", weights.len())));
    }
    Ok(())
}

/// `Σ_b w_b · x_b` for a `[B, 1]` column.
fn weighted_sum(tape: &mut Tape, col: Var, weights: &Tensor) -> Result<Var> {
    check_weights(tape, col, weights)?;
    let w = tape.constant(Tensor::matrix(weights.len(), 1, weights.data().to_vec())?);
    let m = tape.mul(col, w)?;
    Ok(tape.sum(m)?)
}

/// `-log` of clamped probabilities.
fn neg_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let l = tape.log(c)?;
    Ok(tape.scale(l, -1.0)?)
}

fn step_mean(tape: &mut Tape, per_step: Vec<Var>) -> Result<Var> {
    if per_step.is_empty() {
        return Err(Error::Invalid("sequence needs at least 2 frames (T >= 2)".into()));
    }
    let steps = per_step.len() as f64;
    let mut total = per_step[0];
    for &v in &per_step[1..] {
        total = tape.add(total, v)?;
    }
    Ok(tape.scale(total, 1.0 / steps)?)
}

/// Mean over steps of the weighted pose distance between forecasts and the true next poses.
pub fn regression_loss(tape: &mut Tape, forecasts: &[Var], truths: &[Var], weights: &Tensor) -> Result<Var> {
    if forecasts.len() != truths.len() {
        return Err(Error::Invalid(format!("{} forecasts for {} targets", forecasts.len(), truths.len())));
    }
    let mut terms = Vec::with_capacity(forecasts.len());
    for (&p, &x) in forecasts.iter().zip(truths) {
        let d = pose_distance_rows(tape, p, x)?;
        terms.push(weighted_sum(tape, d, weights)?);
    }
    step_mean(tape, terms)
}

/// Non-saturating generator objective: mean over steps of `-log d_t`.
pub fn adversarial_loss(tape: &mut Tape, fake_scores: &[Var], weights: &Tensor) -> Result<Var> {
    let mut terms = Vec::with_capacity(fake_scores.len());
    for &d in fake_scores {
        let nl = neg_log(tape, d)?;
        terms.push(weighted_sum(tape, nl, weights)?);
    }
    step_mean(tape, terms)
}

/// `L_reg + λ · L_adv`.
pub fn generator_loss(tape: &mut Tape, reg: Var, adv: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("adversarial weight must be non-negative, got {lambda}")));
    }
    let scaled = tape.scale(adv, lambda)?;
    Ok(tape.add(reg, scaled)?)
}

/// Mean over steps of `-log D(real) - log(1 - D(fake))`.
pub fn discriminator_loss(tape: &mut Tape, real_scores: &[Var], fake_scores: &[Var], weights: &Tensor) -> Result<Var> {
    if real_scores.len() != fake_scores.len() {
        return Err(Error::Invalid("real and fake score counts differ".into()));
    }
    let mut terms = Vec::with_capacity(real_scores.len());
    for (&r, &f) in real_scores.iter().zip(fake_scores) {
        let lr = neg_log(tape, r)?;
        let neg = tape.scale(f, -1.0)?;
        let one_minus = tape.offset(neg, 1.0)?;
        let lf = neg_log(tape, one_minus)?;
        let both = tape.add(lr, lf)?;
        terms.push(weighted_sum(tape, both, weights)?);
    }
    step_mean(tape, terms)
}

/// Weighted `-log q(z)` for `[B, |Z|]` probabilities `q` and labels `z`.
pub fn classification_loss(tape: &mut Tape, probs: Var, labels: &[usize], weights: &Tensor) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b || weights.len() != b {
        return Err(Error::Invalid(format!("{} labels and {} weights for a batch of {b}", labels.len(), weights.len())));
    }
    let mut pick = vec![0.0; b * k];
    for (r, &z) in labels.iter().enumerate() {
        if z >= k {
            return Err(Error::Invalid(format!("class label {z} out of range for {k} classes")));
        }
        pick[r * k + z] = weights.data()[r];
    }
    let nl = neg_log(tape, probs)?;
    let mask = tape.constant(Tensor::matrix(b, k, pick)?);
    let m = tape.mul(nl, mask)?;
    Ok(tape.sum(m)?)
}

/// Binary cross-entropy of per-step `[B, 2]` monitor outputs (failure, success)
/// against the sequence label broadcast to every step.
pub fn monitoring_loss(tape: &mut Tape, step_probs: &[Var], labels: &[bool], weights: &Tensor) -> Result<Var> {
    let mut terms = Vec::with_capacity(step_probs.len());
    for &p in step_probs {
        let labels_idx: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
        terms.push(classification_loss(tape, p, &labels_idx, weights)?);
    }
    step_mean(tape, terms)
}

/// Weights selecting `mask`ed rows with equal share; all zero if none selected.
pub fn mean_weights(mask: &[bool]) -> Tensor {
    let n = mask.iter().filter(|&&m| m).count();
    let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    Tensor::vector(mask.iter().map(|&m| if m { w } else { 0.0 }).collect())
}
