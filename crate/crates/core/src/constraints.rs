//! Admission checks for a candidate factorization: the compression bound on
//! the rank, the elementwise noise bound, and the first-order predicted loss
//! change `⟨grad, δ⟩`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{noise, FactorPair, Matrix, Noise};

/// Largest `k` with `k·(n+m) < n·m`; zero when no rank compresses.
pub fn max_compressive_rank(n_rows: usize, m_cols: usize) -> usize {
    let area = n_rows * m_cols;
    if area == 0 {
        return 0;
    }
    (area - 1) / (n_rows + m_cols)
}

/// Whether every entry of `W − L Rᵀ` is within `eps` in absolute value.
pub fn lossless_condition(w: &Matrix, f: &FactorPair, eps: f64) -> Result<bool> {
    check_eps(eps)?;
    Ok(noise(w, f)?.max_abs <= eps)
}

/// `Σ_ij grad_ij · delta_ij`. Negative predicts the loss goes down.
pub fn predicted_loss_delta(grad: &Matrix, delta: &Matrix) -> Result<f64> {
    grad.inner(delta)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "epsilon must be positive and finite, got {eps}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintVerdict {
    pub rank: usize,
    pub compressive: bool,
    pub lossless: bool,
    pub eps: f64,
    pub max_abs_noise: f64,
    pub fro_noise: f64,
    pub predicted_delta: f64,
    /// The factorization reproduces the weight exactly.
    pub exact: bool,
}

impl ConstraintVerdict {
    /// Both inequality constraints hold and the candidate either predicts a
    /// strict loss decrease or introduces no noise at all.
    pub fn admissible(&self) -> bool {
        self.compressive && self.lossless && (self.predicted_delta < 0.0 || self.exact)
    }
}

/// Evaluate all constraints for one candidate against weight `w`.
pub fn check(w: &Matrix, f: &FactorPair, grad: &Matrix, eps: f64) -> Result<ConstraintVerdict> {
    let noise = noise(w, f)?;
    verdict_from_noise(w, f.rank(), &noise, grad, eps)
}

pub(crate) fn verdict_from_noise(
    w: &Matrix,
    rank: usize,
    noise: &Noise,
    grad: &Matrix,
    eps: f64,
) -> Result<ConstraintVerdict> {
    check_eps(eps)?;
    let (n, m) = w.shape();
    Ok(ConstraintVerdict {
        rank,
        compressive: rank >= 1 && rank <= max_compressive_rank(n, m),
        lossless: noise.max_abs <= eps,
        eps,
        max_abs_noise: noise.max_abs,
        fro_noise: noise.fro,
        predicted_delta: predicted_loss_delta(grad, &noise.delta)?,
        exact: noise.delta.is_zero(),
    })
}
