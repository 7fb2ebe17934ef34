//! Cross-entropy, KL divergence and the combined saliency-guided objective.

use crate::error::{Error, Result};
use crate::quant::PactLayerState;
use crate::tape::{self, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Components of one evaluation of the training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub kl_term: f64,
    pub pact_penalty: f64,
    /// `cross_entropy + λ·kl_term + pact_penalty`
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(cross_entropy: f64, kl_term: f64, pact_penalty: f64, lambda: f64) -> Self {
        LossBreakdown {
            cross_entropy,
            kl_term,
            pact_penalty,
            total: cross_entropy + lambda * kl_term + pact_penalty,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cross_entropy.is_finite()
            && self.kl_term.is_finite()
            && self.pact_penalty.is_finite()
            && self.total.is_finite()
    }
}

/// Mean cross-entropy of `logits[batch, classes]` against `labels`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    tape::cross_entropy_value(logits, labels)
}

/// Mean over rows of `D_KL(p‖q)` for probability rows.
pub fn kl_divergence<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    tape::kl_value(p, q)
}

pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::contract(format!(
            "softmax expects [rows, classes], got {:?}",
            logits.shape()
        )));
    }
    Ok(tape::softmax_rows(logits))
}

/// `Σ λ_α·α²` over PACT layers.
pub fn pact_penalty(states: &[PactLayerState], lambda_alpha: f64) -> f64 {
    states
        .iter()
        .map(|s| lambda_alpha * (s.alpha as f64) * (s.alpha as f64))
        .sum()
}

/// Value-level objective:
/// `CE(orig, y) + λ·D_KL(softmax(orig) ‖ softmax(masked)) + Σ λ_α·α²`.
pub fn sgt_loss<T: Real>(
    logits_orig: &Tensor<T>,
    logits_masked: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    pact_states: &[PactLayerState],
    lambda_alpha: f64,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    if logits_orig.shape() != logits_masked.shape() {
        return Err(Error::shape("sgt_loss", logits_orig.shape(), logits_masked.shape()));
    }
    let ce = cross_entropy(logits_orig, labels)?;
    let kl = kl_divergence(&softmax(logits_orig)?, &softmax(logits_masked)?)?;
    Ok(LossBreakdown::compose(ce, kl, pact_penalty(pact_states, lambda_alpha), lambda))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("λ must be non-negative, got {lambda}")));
    }
    Ok(())
}

/// Tape handles for the objective.
#[derive(Debug, Clone, Copy)]
pub struct SgtLossVars {
    /// `CE + λ·KL`, the part that depends on the network parameters.
    pub task: Var,
    /// `task + Σ λ_α·α²`.
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records the objective on `tape`. When `logits_masked` is `None` the KL
/// term is absent (zero). `alphas` are the one-element clipping variables.
pub fn sgt_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    logits_orig: Var,
    logits_masked: Option<Var>,
    labels: &[usize],
    lambda: f64,
    alphas: &[Var],
    lambda_alpha: f64,
) -> Result<SgtLossVars> {
    check_lambda(lambda)?;
    let ce = tape.cross_entropy(logits_orig, labels)?;
    let ce_value = tape.value(ce).data()[0].as_f64();
    let (task, kl_value) = match logits_masked {
        Some(masked) => {
            let p = tape.softmax(logits_orig)?;
            let q = tape.softmax(masked)?;
            let kl = tape.kl_divergence(p, q)?;
            let kl_value = tape.value(kl).data()[0].as_f64();
            let weighted = tape.scale(kl, lambda);
            (tape.add(ce, weighted)?, kl_value)
        }
        None => (ce, 0.0),
    };
    let mut total = task;
    let mut penalty = 0.0;
    for &a in alphas {
        let sq = tape.mul(a, a)?;
        let term = tape.scale(sq, lambda_alpha);
        penalty += tape.value(term).data()[0].as_f64();
        total = tape.add(total, term)?;
    }
    Ok(SgtLossVars {
        task,
        total,
        breakdown: LossBreakdown::compose(ce_value, kl_value, penalty, lambda),
    })
}
