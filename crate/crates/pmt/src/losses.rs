//! Loss terms and schedules: binary cross-entropy, soft Dice, MSE,
//! pseudo-label sharpening, the disagreement-driven alignment triple,
//! teacher consistency, Gaussian warm-ups, and total-loss assembly.
//!
//! Gradient-flow contract: sharpened targets, peer predictions, and teacher
//! predictions are always treated as fixed labels — no gradient ever reaches
//! them. Callers pass detached tensors for those arguments; `sharpen` itself
//! runs under `no_grad`.

use serde::{Deserialize, Serialize};

use crate::gradcore::{cast, no_grad, Scalar, Tensor, TensorError, TensorResult};

/// Log arguments in cross-entropy are clamped below at this value.
pub const CE_LOG_CLAMP: f64 = 1e-7;
/// Smoothing constant in the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Loss weighting hyperparameters.
///
/// `lambda1_hat` scales the peer pseudo-label loss, `lambda2_hat` the teacher
/// consistency loss; both ramp up along [`warmup`]. `beta` weights the
/// alignment term inside the supervised loss and `temperature` drives
/// [`sharpen`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1_hat: f64,
    pub lambda2_hat: f64,
    pub beta: f64,
    pub temperature: f64,
    /// Warm-up horizon; `None` means "use the trainer's total iterations".
    pub t_max: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1_hat: 20.0,
            lambda2_hat: 10.0,
            beta: 0.5,
            temperature: 0.1,
            t_max: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> TensorResult<()> {
        if self.lambda1_hat < 0.0 || self.lambda2_hat < 0.0 || self.beta < 0.0 {
            return Err(TensorError::InvalidArg {
                op: "loss_weights",
                msg: "lambda1_hat, lambda2_hat and beta must be >= 0".into(),
            });
        }
        if self.temperature <= 0.0 {
            return Err(TensorError::InvalidArg {
                op: "loss_weights",
                msg: "temperature must be > 0".into(),
            });
        }
        if self.t_max == Some(0) {
            return Err(TensorError::InvalidArg {
                op: "loss_weights",
                msg: "t_max must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn resolve_t_max(&self, trainer_total_iters: usize) -> usize {
        self.t_max.unwrap_or(trainer_total_iters)
    }
}

/// Per-iteration loss record. All values are `f64` copies of the scalars that
/// entered the (single-precision) total, recomputed in double precision so
/// the identity `l_total = l_s + lambda1*plf*l_u + lambda2*l_t` holds exactly
/// in the log.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_aln: f64,
    pub l_u: f64,
    pub l_t: f64,
    pub l_s: f64,
    pub l_total: f64,
    pub plf_pass: u8,
    pub lambda1_t: f64,
    pub lambda2_t: f64,
}

/// Mean binary cross-entropy with log arguments clamped at 1e-7.
pub fn ce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "ce_loss",
            lhs: pred.shape(),
            rhs: target.shape(),
        });
    }
    let clamp = cast::<T>(CE_LOG_CLAMP);
    let pos = target.mul(&pred.ln_clamped(clamp)?)?;
    let neg = target.rsub_scalar(T::one())?.mul(&pred.rsub_scalar(T::one())?.ln_clamped(clamp)?)?;
    pos.add(&neg)?.mean()?.neg()
}

/// Soft Dice loss, computed per sample and averaged over the batch.
///
/// For each sample: `1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)` with
/// `eps = 1e-5`. Tensors of rank >= 3 treat dim 0 as the batch; lower ranks
/// are a single sample.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            lhs: pred.shape(),
            rhs: target.shape(),
        });
    }
    let shape = pred.shape();
    let eps = cast::<T>(DICE_EPS);
    let per_sample = |p: &Tensor<T>, y: &Tensor<T>| -> TensorResult<Tensor<T>> {
        let inter = p.mul(y)?.sum()?;
        let denom = p.sum()?.add(&y.sum()?)?.add_scalar(eps)?;
        inter.mul_scalar(cast::<T>(2.0))?.add_scalar(eps)?.div(&denom)?.rsub_scalar(T::one())
    };
    if shape.len() < 3 {
        return per_sample(pred, target);
    }
    let batch = shape[0];
    let mut acc: Option<Tensor<T>> = None;
    for i in 0..batch {
        let d = per_sample(&pred.narrow(0, i, 1)?, &target.narrow(0, i, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&d)?,
            None => d,
        });
    }
    acc.unwrap().div_scalar(cast::<T>(batch as f64))
}

/// Mean squared error.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let d = a.sub(b)?;
    d.mul(&d)?.mean()
}

/// Temperature sharpening `p^(1/T) / (p^(1/T) + (1-p)^(1/T))`.
///
/// The result is a detached target: no gradient flows through it.
pub fn sharpen<T: Scalar>(p: &Tensor<T>, temperature: f64) -> TensorResult<Tensor<T>> {
    if temperature <= 0.0 {
        return Err(TensorError::InvalidArg {
            op: "sharpen",
            msg: format!("temperature must be > 0, got {temperature}"),
        });
    }
    let e = cast::<T>(1.0 / temperature);
    no_grad(|| {
        let p = p.detach();
        let num = p.powf(e)?;
        let den = num.add(&p.rsub_scalar(T::one())?.powf(e)?)?;
        num.div(&den)
    })
}

/// Unsupervised co-training loss: MSE between the training model's unlabeled
/// prediction and the sharpened peer pseudo-label. `peer_pred_u` must be
/// detached.
pub fn unsup_loss<T: Scalar>(
    cpm_pred_u: &Tensor<T>,
    peer_pred_u: &Tensor<T>,
    temperature: f64,
) -> TensorResult<Tensor<T>> {
    mse(cpm_pred_u, &sharpen(peer_pred_u, temperature)?)
}

/// Teacher consistency loss: MSE between the student's unlabeled prediction
/// and the sharpened teacher prediction. `teacher_pred_u` must be detached.
pub fn teacher_consistency<T: Scalar>(
    student_pred_u: &Tensor<T>,
    teacher_pred_u: &Tensor<T>,
    temperature: f64,
) -> TensorResult<Tensor<T>> {
    mse(student_pred_u, &sharpen(teacher_pred_u, temperature)?)
}

/// Disagreement mask: union minus intersection of the binarized prediction
/// maps — 1 exactly where the models' binary outputs differ. Never carries
/// gradients.
pub fn dda_mask<T: Scalar>(preds_l: &[Tensor<T>], threshold: f64) -> TensorResult<Tensor<T>> {
    if preds_l.len() < 2 {
        return Err(TensorError::InvalidArg {
            op: "dda_mask",
            msg: format!("need >= 2 prediction maps, got {}", preds_l.len()),
        });
    }
    let shape = preds_l[0].shape();
    for p in &preds_l[1..] {
        if p.shape() != shape {
            return Err(TensorError::ShapeMismatch {
                op: "dda_mask",
                lhs: shape,
                rhs: p.shape(),
            });
        }
    }
    let thr = cast::<T>(threshold);
    let bins: Vec<Vec<T>> = preds_l.iter().map(|p| p.gt_scalar(thr).to_vec()).collect();
    let n = bins[0].len();
    let mut mask = vec![T::zero(); n];
    for i in 0..n {
        let union = bins.iter().any(|b| b[i] == T::one());
        let inter = bins.iter().all(|b| b[i] == T::one());
        if union && !inter {
            mask[i] = T::one();
        }
    }
    Ok(Tensor::leaf(mask, shape, false))
}

/// Alignment loss: squared error to ground truth averaged over the
/// disagreement mask; 0 when the mask is empty (agreement leaves nothing to
/// align). Gradients flow only through `cpm_pred_l`.
pub fn dda_align_loss<T: Scalar>(
    cpm_pred_l: &Tensor<T>,
    gt_l: &Tensor<T>,
    m_diff: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    if cpm_pred_l.shape() != gt_l.shape() || cpm_pred_l.shape() != m_diff.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "dda_align_loss",
            lhs: cpm_pred_l.shape(),
            rhs: gt_l.shape(),
        });
    }
    let count = m_diff.with_data(|d| {
        d.iter()
            .fold(0.0f64, |acc, &v| acc + v.to_f64().unwrap())
    });
    if count == 0.0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let err = cpm_pred_l.sub(gt_l)?;
    let m_dist = err.mul(&err)?;
    m_dist.mul(m_diff)?.sum()?.div_scalar(cast::<T>(count))
}

/// Gaussian warm-up: `hat * exp(-5 * (1 - 2t/t_max)^2)` until `t_max/2`, then
/// the plateau `hat`.
pub fn warmup(t: usize, t_max: usize, hat: f64) -> TensorResult<f64> {
    if t_max == 0 {
        return Err(TensorError::InvalidArg {
            op: "warmup",
            msg: "t_max must be >= 1".into(),
        });
    }
    let t = t as f64;
    let t_max = t_max as f64;
    if t >= t_max / 2.0 {
        Ok(hat)
    } else {
        let u = 1.0 - 2.0 * t / t_max;
        Ok(hat * (-5.0 * u * u).exp())
    }
}

/// The scalar loss terms that enter the total. `None` means the term is
/// disabled this iteration and contributes exactly zero.
pub struct LossParts<T: Scalar> {
    pub ce: Tensor<T>,
    pub dice: Tensor<T>,
    pub aln: Option<Tensor<T>>,
    pub unsup: Option<Tensor<T>>,
    pub teacher: Option<Tensor<T>>,
}

/// Assembles the total loss
/// `L = ce + dice + beta*plf*aln + lambda1(t)*plf*unsup + lambda2(t)*teacher`
/// and its double-precision breakdown record.
pub fn assemble_total<T: Scalar>(
    parts: &LossParts<T>,
    weights: &LossWeights,
    t: usize,
    t_max: usize,
    plf_pass: u8,
) -> TensorResult<(Tensor<T>, LossBreakdown)> {
    weights.validate()?;
    let lambda1_t = warmup(t, t_max, weights.lambda1_hat)?;
    let lambda2_t = warmup(t, t_max, weights.lambda2_hat)?;
    let plf = f64::from(plf_pass);

    let l_ce = parts.ce.item()?.to_f64().unwrap();
    let l_dice = parts.dice.item()?.to_f64().unwrap();
    let l_aln = parts.aln.as_ref().map_or(Ok(0.0), |a| a.item().map(|v| v.to_f64().unwrap()))?;
    let l_u = parts.unsup.as_ref().map_or(Ok(0.0), |a| a.item().map(|v| v.to_f64().unwrap()))?;
    let l_t = parts.teacher.as_ref().map_or(Ok(0.0), |a| a.item().map(|v| v.to_f64().unwrap()))?;

    let mut total = parts.ce.add(&parts.dice)?;
    if let Some(aln) = &parts.aln {
        total = total.add(&aln.mul_scalar(cast::<T>(weights.beta * plf))?)?;
    }
    if let Some(unsup) = &parts.unsup {
        total = total.add(&unsup.mul_scalar(cast::<T>(lambda1_t * plf))?)?;
    }
    if let Some(teacher) = &parts.teacher {
        total = total.add(&teacher.mul_scalar(cast::<T>(lambda2_t))?)?;
    }

    let l_s = l_ce + l_dice + weights.beta * plf * l_aln;
    let l_total = l_s + lambda1_t * plf * l_u + lambda2_t * l_t;
    let breakdown = LossBreakdown {
        l_ce,
        l_dice,
        l_aln,
        l_u,
        l_t,
        l_s,
        l_total,
        plf_pass,
        lambda1_t,
        lambda2_t,
    };
    Ok((total, breakdown))
}

/// PLF gate: a peer's pseudo-labels pass when its supervised Dice loss on the
/// current labeled half is not worse than the training model's (ties pass).
pub fn plf_check<T: Scalar>(
    cpm_pred_l: &Tensor<T>,
    peer_pred_l: &Tensor<T>,
    gt_l: &Tensor<T>,
) -> TensorResult<u8> {
    let cpm = no_grad(|| dice_loss(&cpm_pred_l.detach(), gt_l))?.item()?;
    let peer = no_grad(|| dice_loss(&peer_pred_l.detach(), gt_l))?.item()?;
    Ok(u8::from(peer <= cpm))
}
