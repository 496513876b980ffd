//! One-class SVM head: the hyperplane `(w, ρ)` separating embeddings from the
//! origin, in smoothed-primal and dual form.
//!
//! Primal (exact): `F = ‖w‖²/2 + (1/nλ) Σ G(ρ − wᵀh̄ᵢ) − ρ` with `G = max(0, ·)`.
//! The gradient path replaces `G` by the softplus `S_τ`, which overestimates
//! it by at most `log(2)/τ`. The dual is `min ½ αᵀKα` over the simplex-box.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;
use crate::dual::{
    self, flat_pair, partial_sum, validate_gram, DualError, DualSolution, PairRule, SmoOutcome,
    INTERIOR_MARGIN,
};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("embedding list is empty")]
    Empty,
    #[error("embedding has dimension {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid smoothing config: {0}")]
    Config(String),
    #[error(transparent)]
    Dual(#[from] DualError),
}

pub type Result<T> = std::result::Result<T, HeadError>;

/// `max(0, ω)`.
pub fn hinge(omega: f64) -> f64 {
    omega.max(0.0)
}

/// `(1/τ) log(1 + e^{τω})`, evaluated without overflow.
pub fn smooth_hinge(omega: f64, tau: f64) -> f64 {
    let t = tau * omega;
    if t > 0.0 {
        omega + (-t).exp().ln_1p() / tau
    } else {
        t.exp().ln_1p() / tau
    }
}

/// Logistic function, branch-stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl SmoothingConfig {
    pub fn new(tau: f64, lambda: f64) -> Result<Self> {
        let cfg = Self { tau, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(HeadError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(HeadError::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneModel {
    #[serde(with = "crate::serde_vec")]
    pub w: DVector<f64>,
    pub rho: f64,
}

impl HyperplaneModel {
    pub fn new(w: DVector<f64>, rho: f64) -> Self {
        Self { w, rho }
    }

    /// `wᵀh̄ − ρ`; non-negative means nominal.
    pub fn margin(&self, h_bar: &DVector<f64>) -> f64 {
        self.w.dot(h_bar) - self.rho
    }
}

fn check_embeddings(dim: usize, embeddings: &[DVector<f64>]) -> Result<()> {
    if embeddings.is_empty() {
        return Err(HeadError::Empty);
    }
    if let Some(h) = embeddings.iter().find(|h| h.len() != dim) {
        return Err(HeadError::Dimension {
            expected: dim,
            found: h.len(),
        });
    }
    Ok(())
}

fn objective_with(
    model: &HyperplaneModel,
    embeddings: &[DVector<f64>],
    lambda: f64,
    slack: impl Fn(f64) -> f64,
) -> Result<f64> {
    check_embeddings(model.w.len(), embeddings)?;
    let n = embeddings.len() as f64;
    let total: f64 = embeddings.iter().map(|h| slack(model.rho - model.w.dot(h))).sum();
    Ok(0.5 * model.w.norm_squared() + total / (n * lambda) - model.rho)
}

/// Smoothed objective `F_τ(w, ρ)`.
pub fn primal_objective(model: &HyperplaneModel, embeddings: &[DVector<f64>], cfg: &SmoothingConfig) -> Result<f64> {
    cfg.validate()?;
    objective_with(model, embeddings, cfg.lambda, |b| smooth_hinge(b, cfg.tau))
}

/// Exact hinge objective `F(w, ρ)`.
pub fn exact_objective(model: &HyperplaneModel, embeddings: &[DVector<f64>], lambda: f64) -> Result<f64> {
    objective_with(model, embeddings, lambda, hinge)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperplaneGradient {
    pub grad_w: DVector<f64>,
    pub grad_rho: f64,
    /// `∂F_τ/∂h̄ᵢ = −σ(τβᵢ) w / (nλ)`, to be pulled back through the encoder.
    pub upstream: Vec<DVector<f64>>,
}

pub fn primal_gradients(
    model: &HyperplaneModel,
    embeddings: &[DVector<f64>],
    cfg: &SmoothingConfig,
) -> Result<HyperplaneGradient> {
    cfg.validate()?;
    check_embeddings(model.w.len(), embeddings)?;
    let scale = 1.0 / (embeddings.len() as f64 * cfg.lambda);
    let mut grad_w = model.w.clone();
    let mut sig_sum = 0.0;
    let mut upstream = Vec::with_capacity(embeddings.len());
    for h in embeddings {
        let sig = sigmoid(cfg.tau * (model.rho - model.w.dot(h)));
        grad_w.axpy(-scale * sig, h, 1.0);
        sig_sum += sig;
        upstream.push(&model.w * (-scale * sig));
    }
    Ok(HyperplaneGradient {
        grad_w,
        grad_rho: scale * sig_sum - 1.0,
        upstream,
    })
}

pub fn score_hyperplane(model: &HyperplaneModel, h_bar: &DVector<f64>) -> Label {
    Label::from_margin(model.margin(h_bar))
}

/// `½ αᵀKα`.
pub fn dual_objective(alpha: &DualSolution, gram: &DMatrix<f64>) -> Result<f64> {
    validate_gram(gram, alpha.len())?;
    Ok(OcsvmDual.objective(gram, &alpha.alpha))
}

/// Pair rule for `½ αᵀKα`:
/// `α_b ← (s(K_aa − K_ab) + M_a − M_b) / (K_aa + K_bb − 2K_ab)` with
/// `s = α_a + α_b`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OcsvmDual;

impl PairRule for OcsvmDual {
    fn objective(&self, gram: &DMatrix<f64>, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        0.5 * a.dot(&(gram * &a))
    }

    fn pair_optimum(&self, gram: &DMatrix<f64>, alpha: &[f64], k_alpha: &[f64], a: usize, b: usize) -> Option<f64> {
        let denom = flat_pair(gram, a, b)?;
        let s = alpha[a] + alpha[b];
        let m_a = partial_sum(gram, alpha, k_alpha, a, b);
        let m_b = partial_sum(gram, alpha, k_alpha, b, a);
        Some((s * (gram[(a, a)] - gram[(a, b)]) + m_a - m_b) / denom)
    }
}

pub fn smo_sweep(alpha: &DualSolution, gram: &DMatrix<f64>) -> Result<DualSolution> {
    Ok(dual::smo_sweep(&OcsvmDual, alpha, gram)?)
}

pub fn solve_dual(init: &DualSolution, gram: &DMatrix<f64>, tol: f64, max_sweeps: usize) -> Result<SmoOutcome> {
    Ok(dual::smo_solve(&OcsvmDual, init, gram, tol, max_sweeps)?)
}

/// `ρ` averaged over `(Kα)_i` for every interior multiplier.
pub fn recover_rho(alpha: &DualSolution, gram: &DMatrix<f64>) -> Result<f64> {
    validate_gram(gram, alpha.len())?;
    let interior = alpha.interior();
    if interior.is_empty() {
        return Err(DualError::NoMarginVector.into());
    }
    let k_alpha = gram * alpha.as_vector();
    Ok(interior.iter().map(|&i| k_alpha[i]).sum::<f64>() / interior.len() as f64)
}

/// Midpoint of the interval of `ρ` values consistent with the KKT conditions
/// when no multiplier is interior: `ρ ≥ (Kα)_i` at the upper bound and
/// `ρ ≤ (Kα)_i` at zero.
pub fn rho_from_kkt_bounds(alpha: &DualSolution, gram: &DMatrix<f64>) -> Result<f64> {
    validate_gram(gram, alpha.len())?;
    let k_alpha = gram * alpha.as_vector();
    let u = alpha.upper_bound();
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for (i, &a) in alpha.alpha.iter().enumerate() {
        if a >= u - INTERIOR_MARGIN {
            lower = lower.max(k_alpha[i]);
        }
        if a <= INTERIOR_MARGIN {
            upper = upper.min(k_alpha[i]);
        }
    }
    Ok(match (lower.is_finite(), upper.is_finite()) {
        (true, true) => 0.5 * (lower + upper),
        (true, false) => lower,
        (false, true) => upper,
        (false, false) => k_alpha.mean(),
    })
}

/// `Σ αⱼ K_j − ρ` for a test row `K_j = h̄ⱼᵀh̄`.
pub fn dual_margin(alpha: &DualSolution, rho: f64, gram_row: &[f64]) -> f64 {
    alpha.alpha.iter().zip(gram_row).map(|(a, k)| a * k).sum::<f64>() - rho
}

pub fn score_dual(alpha: &DualSolution, rho: f64, gram_row: &[f64]) -> Label {
    Label::from_margin(dual_margin(alpha, rho, gram_row))
}

/// `w = Σ αᵢ h̄ᵢ`.
pub fn hyperplane_from_dual(alpha: &DualSolution, embeddings: &[DVector<f64>], rho: f64) -> HyperplaneModel {
    let mut w = DVector::zeros(embeddings.first().map_or(0, |h| h.len()));
    for (a, h) in alpha.alpha.iter().zip(embeddings) {
        w.axpy(*a, h, 1.0);
    }
    HyperplaneModel { w, rho }
}
