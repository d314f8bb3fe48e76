//! Softmax, cross-entropy and the three-term OECC fine-tuning objective.
//!
//! Every loss returns its value together with the gradient with respect to
//! the logits, shaped like the logit batch (`batch × K`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Loss value and its logit-space gradient.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

/// Regularization weights of the OECC objective and the frozen training
/// accuracy it calibrates towards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OeccConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub train_accuracy: f64,
}

impl OeccConfig {
    pub fn new(lambda1: f64, lambda2: f64, train_accuracy: f64) -> Result<Self> {
        let cfg = Self {
            lambda1,
            lambda2,
            train_accuracy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "lambdas must be >= 0, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        if !(0.0..=1.0).contains(&self.train_accuracy) {
            return Err(Error::Config(format!(
                "training accuracy must lie in [0, 1], got {}",
                self.train_accuracy
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_batch(logits: &Tensor, what: &str) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{what}: logits must be batch x K, got {:?}",
            logits.shape()
        )));
    }
    Ok((logits.rows(), logits.cols()))
}

/// Mean cross-entropy over the batch.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    let (b, k) = check_batch(logits, "ce_loss")?;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "ce_loss: {b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label { label, num_classes: k });
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.item_slice(i);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
        let p = softmax(z);
        for (j, pj) in p.into_iter().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *grad.at_mut(i, j) = (pj - onehot) / b as f64;
        }
    }
    Ok(LossGrad {
        value: total / b as f64,
        grad,
    })
}

/// `(A_tr − mean_b max_l softmax(z_b)_l)²`.
///
/// The mean couples all rows, so the gradient of each row depends on the
/// whole batch. At argmax ties the lowest class index carries the gradient.
pub fn confidence_term(logits: &Tensor, train_accuracy: f64) -> Result<LossGrad> {
    let (b, k) = check_batch(logits, "confidence_term")?;
    let probs: Vec<Vec<f64>> = (0..b).map(|i| softmax(logits.item_slice(i))).collect();
    let top: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mean_conf = probs.iter().zip(&top).map(|(p, &c)| p[c]).sum::<f64>() / b as f64;
    let gap = train_accuracy - mean_conf;

    let mut grad = Tensor::zeros(&[b, k]);
    let outer = -2.0 * gap / b as f64;
    for (i, (p, &c)) in probs.iter().zip(&top).enumerate() {
        let pc = p[c];
        for j in 0..k {
            let delta = if j == c { 1.0 } else { 0.0 };
            *grad.at_mut(i, j) = outer * pc * (delta - p[j]);
        }
    }
    Ok(LossGrad { value: gap * gap, grad })
}

/// l1 distance of each softmax row to the uniform distribution, averaged
/// over the batch (the per-example sum scaled by `1/batch`).
///
/// Subgradient convention: `sign(p_l − 1/K)`, zero at equality.
pub fn uniformity_term(logits: &Tensor) -> Result<LossGrad> {
    let (b, k) = check_batch(logits, "uniformity_term")?;
    let u = 1.0 / k as f64;
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    for i in 0..b {
        let p = softmax(logits.item_slice(i));
        let signs: Vec<f64> = p.iter().map(|&pl| sign(pl - u)).collect();
        total += p.iter().map(|&pl| (u - pl).abs()).sum::<f64>();
        let weighted: f64 = signs.iter().zip(&p).map(|(s, pl)| s * pl).sum();
        for j in 0..k {
            *grad.at_mut(i, j) = p[j] * (signs[j] - weighted) / b as f64;
        }
    }
    Ok(LossGrad {
        value: total / b as f64,
        grad,
    })
}

/// `sign` with `sign(0) = 0`, unlike [`f64::signum`].
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Value and gradients of the joint OECC objective.
#[derive(Debug, Clone)]
pub struct OeccLoss {
    pub value: f64,
    pub grad_in: Tensor,
    pub grad_oe: Tensor,
    pub ce: f64,
    pub confidence: f64,
    pub uniformity: f64,
}

/// `ce + λ1·confidence + λ2·uniformity`.
///
/// A term whose weight is zero is skipped entirely, so with both weights
/// zero the value and in-batch gradient are exactly those of [`ce_loss`].
pub fn oecc_loss(in_logits: &Tensor, labels: &[usize], oe_logits: &Tensor, cfg: &OeccConfig) -> Result<OeccLoss> {
    cfg.validate()?;
    let (_, k_oe) = check_batch(oe_logits, "oecc_loss")?;
    if k_oe != in_logits.shape().get(1).copied().unwrap_or(0) {
        return Err(Error::Dimension(
            "in-batch and OE-batch logits have different class counts".into(),
        ));
    }
    let ce = ce_loss(in_logits, labels)?;
    let mut value = ce.value;
    let mut grad_in = ce.grad;
    let mut grad_oe = Tensor::zeros(oe_logits.shape());
    let (mut confidence, mut uniformity) = (0.0, 0.0);

    if cfg.lambda1 != 0.0 {
        let t = confidence_term(in_logits, cfg.train_accuracy)?;
        confidence = t.value;
        value += cfg.lambda1 * t.value;
        grad_in.axpy(cfg.lambda1, &t.grad)?;
    }
    if cfg.lambda2 != 0.0 {
        let t = uniformity_term(oe_logits)?;
        uniformity = t.value;
        value += cfg.lambda2 * t.value;
        grad_oe = t.grad.scale(cfg.lambda2);
    }
    Ok(OeccLoss {
        value,
        grad_in,
        grad_oe,
        ce: ce.value,
        confidence,
        uniformity,
    })
}
