//! Exponential-decay cross-entropy and its focal variant.
//!
//! Both come as plain `f64` functions over a probability slice and as tape
//! graphs for training; the two agree to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Exponential,
    #[default]
    FocalExponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Weight of the negative-class term; the positive term gets `1 − α`.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::FocalExponential,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn exponential() -> Self {
        LossConfig {
            variant: LossVariant::Exponential,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }

    /// Loss of one sequence at frame rate `r`.
    pub fn loss(&self, probs: &[f64], target: &SequenceTarget, r: f64) -> Result<f64> {
        match self.variant {
            LossVariant::Exponential => exponential_loss(probs, target, r),
            LossVariant::FocalExponential => focal_exponential_loss(probs, target, r, self.alpha, self.gamma),
        }
    }
}

/// Video-level label and accident frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceTarget {
    pub label: u8,
    pub t_ao: Option<u32>,
}

impl SequenceTarget {
    pub fn negative() -> Self {
        SequenceTarget { label: 0, t_ao: None }
    }

    pub fn positive(t_ao: u32) -> Self {
        SequenceTarget {
            label: 1,
            t_ao: Some(t_ao),
        }
    }

    fn check(&self, steps: usize) -> Result<()> {
        match (self.label, self.t_ao) {
            (0, None) => Ok(()),
            (1, Some(t)) if t >= 1 && t as usize <= steps => Ok(()),
            _ => Err(Error::Contract(format!(
                "inconsistent target {self:?} for {steps} frames"
            ))),
        }
    }

    /// Per-frame positive weights `y · decay_weight(t)`, 1-based frames.
    fn positive_weights(&self, steps: usize, r: f64) -> Vec<f64> {
        match self.t_ao {
            Some(t_ao) if self.label == 1 => (1..=steps).map(|t| decay_weight(t, t_ao as usize, r)).collect(),
            _ => vec![0.0; steps],
        }
    }
}

/// `exp(−max(0, (t_ao − t)/r))`.
pub fn decay_weight(t: usize, t_ao: usize, r: f64) -> f64 {
    let gap = (t_ao as f64 - t as f64) / r;
    (-gap.max(0.0)).exp()
}

fn check_rate(r: f64) -> Result<()> {
    if !(r >= 1.0) {
        return Err(Error::Config(format!("frame rate {r} must be >= 1")));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// `−Σ_t [(1−y)·log(1−p_t) + y·w_t·log p_t]`.
pub fn exponential_loss(probs: &[f64], target: &SequenceTarget, r: f64) -> Result<f64> {
    check_rate(r)?;
    target.check(probs.len())?;
    let w = target.positive_weights(probs.len(), r);
    let neg = (1 - target.label) as f64;
    Ok(-probs
        .iter()
        .zip(&w)
        .map(|(&p, &w)| {
            let p = clamp(p);
            neg * (1.0 - p).ln() + w * p.ln()
        })
        .sum::<f64>())
}

/// `−Σ_t [α·p_t^γ·(1−y)·log(1−p_t) + (1−α)·(1−p_t)^γ·y·w_t·log p_t]`.
pub fn focal_exponential_loss(probs: &[f64], target: &SequenceTarget, r: f64, alpha: f64, gamma: f64) -> Result<f64> {
    check_rate(r)?;
    target.check(probs.len())?;
    let w = target.positive_weights(probs.len(), r);
    let neg = (1 - target.label) as f64;
    Ok(-probs
        .iter()
        .zip(&w)
        .map(|(&p, &w)| {
            let p = clamp(p);
            alpha * p.powf(gamma) * neg * (1.0 - p).ln() + (1.0 - alpha) * (1.0 - p).powf(gamma) * w * p.ln()
        })
        .sum::<f64>())
}

/// The configured loss as a tape graph over `probs: [T]`.
pub fn loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    probs: Var,
    target: &SequenceTarget,
    r: f64,
    cfg: &LossConfig,
) -> Result<Var> {
    check_rate(r)?;
    let steps = tape.shape(probs).iter().product();
    target.check(steps)?;
    let shape = tape.shape(probs).to_vec();
    let w = target.positive_weights(steps, r);
    let neg = (1 - target.label) as f64;

    let p = tape.clamp(probs, EPS, 1.0 - EPS);
    let q = tape.affine(p, -1.0, 1.0);
    let log_p = tape.log(p);
    let log_q = tape.log(q);
    let (neg_coef, pos_coef) = match cfg.variant {
        LossVariant::Exponential => (neg, 1.0),
        LossVariant::FocalExponential => (cfg.alpha * neg, 1.0 - cfg.alpha),
    };
    let neg_w = tape.constant(Tensor::full(shape.clone(), F::c(-neg_coef)));
    let pos_w = tape.constant(Tensor::new(shape, w.iter().map(|&w| F::c(-pos_coef * w)).collect())?);
    let (neg_term, pos_term) = match cfg.variant {
        LossVariant::Exponential => (log_q, log_p),
        LossVariant::FocalExponential => {
            let pg = tape.powf(p, cfg.gamma);
            let qg = tape.powf(q, cfg.gamma);
            (tape.mul(pg, log_q)?, tape.mul(qg, log_p)?)
        }
    };
    let a = tape.mul(neg_term, neg_w)?;
    let b = tape.mul(pos_term, pos_w)?;
    let total = tape.add(a, b)?;
    Ok(tape.sum(total))
}
