use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};

/// Binary cross-entropy of `sigmoid(logit)` against `positive`, computed
/// as `softplus(∓logit)` to stay finite for large logits.
pub fn bce_from_logit(tape: &mut Tape, logit: Var, positive: bool) -> Var {
    let signed = if positive { tape.scale(logit, -1.0) } else { logit };
    tape.softplus(signed)
}

/// Uncertainty-weighted sum on the tape, with `s = log σ²`:
/// `½e^{-s₁}·loss1 + ½e^{-s₂}·loss2 + ½(s₁ + s₂)`.
/// Without a decoder loss the `s₂` terms are dropped.
pub fn multi_task_loss(tape: &mut Tape, loss1: Var, loss2: Option<Var>, log_s1: Var, log_s2: Var) -> Var {
    let weighted = |tape: &mut Tape, loss: Var, s: Var| {
        let neg = tape.scale(s, -1.0);
        let w = tape.exp(neg);
        let wl = tape.mul(w, loss);
        let wl = tape.scale(wl, 0.5);
        let reg = tape.scale(s, 0.5);
        tape.add(wl, reg)
    };
    let t1 = weighted(tape, loss1, log_s1);
    match loss2 {
        Some(l2) => {
            let t2 = weighted(tape, l2, log_s2);
            tape.add(t1, t2)
        }
        None => t1,
    }
}

/// Closed-form values of the weighted loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskLoss {
    pub log_sigma1_sq: f64,
    pub log_sigma2_sq: f64,
    pub loss1: f64,
    pub loss2: f64,
}

impl MultiTaskLoss {
    pub fn from_sigmas(sigma1: f64, sigma2: f64, loss1: f64, loss2: f64) -> Self {
        MultiTaskLoss {
            log_sigma1_sq: 2.0 * sigma1.ln(),
            log_sigma2_sq: 2.0 * sigma2.ln(),
            loss1,
            loss2,
        }
    }

    pub fn sigmas(&self) -> (f64, f64) {
        ((self.log_sigma1_sq / 2.0).exp(), (self.log_sigma2_sq / 2.0).exp())
    }

    /// `loss1/(2σ₁²) + loss2/(2σ₂²) + log(σ₁σ₂)`.
    pub fn total(&self) -> f64 {
        0.5 * (-self.log_sigma1_sq).exp() * self.loss1
            + 0.5 * (-self.log_sigma2_sq).exp() * self.loss2
            + 0.5 * (self.log_sigma1_sq + self.log_sigma2_sq)
    }

    /// Gradient with respect to `(σ₁, σ₂)`: `−lossᵢ/σᵢ³ + 1/σᵢ`.
    pub fn grad_sigma(&self) -> (f64, f64) {
        let (s1, s2) = self.sigmas();
        (-self.loss1 / s1.powi(3) + 1.0 / s1, -self.loss2 / s2.powi(3) + 1.0 / s2)
    }

    /// Gradient with respect to the stored `log σᵢ²`.
    pub fn grad_log_sigma_sq(&self) -> (f64, f64) {
        (
            0.5 - 0.5 * (-self.log_sigma1_sq).exp() * self.loss1,
            0.5 - 0.5 * (-self.log_sigma2_sq).exp() * self.loss2,
        )
    }
}
