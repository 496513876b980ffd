//! SVDD head: the hypersphere `(c̃, R²)` enclosing the embeddings.
//!
//! Primal (exact): `F = R² + (1/nλ) Σ G(Ψᵢ)` with `Ψᵢ = ‖h̄ᵢ − c̃‖² − R²`.
//! The dual is `min αᵀKα − Σ αᵢKᵢᵢ` over the same simplex-box as the
//! hyperplane head, with center `c̃ = Σ αᵢh̄ᵢ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::dual::{
    self, flat_pair, partial_sum, validate_gram, DualError, DualSolution, PairRule, SmoOutcome,
    INTERIOR_MARGIN,
};
use crate::ocsvm::{hinge, sigmoid, smooth_hinge, HeadError, Result, SmoothingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereModel {
    #[serde(with = "crate::serde_vec")]
    pub center: DVector<f64>,
    pub r_squared: f64,
}

impl SphereModel {
    pub fn new(center: DVector<f64>, r_squared: f64) -> Self {
        Self { center, r_squared }
    }

    /// Center at the embedding mean, `R²` at the median squared distance.
    pub fn init(embeddings: &[DVector<f64>]) -> Result<Self> {
        let first = embeddings.first().ok_or(HeadError::Empty)?;
        check_embeddings(first.len(), embeddings)?;
        let mut center = DVector::zeros(first.len());
        for h in embeddings {
            center += h;
        }
        center /= embeddings.len() as f64;
        let mut d: Vec<f64> = embeddings.iter().map(|h| (h - &center).norm_squared()).collect();
        d.sort_by(f64::total_cmp);
        let k = d.len();
        let median = if k % 2 == 1 {
            d[k / 2]
        } else {
            0.5 * (d[k / 2 - 1] + d[k / 2])
        };
        Ok(Self {
            center,
            r_squared: median,
        })
    }

    /// `R² − ‖h̄ − c̃‖²`; non-negative means nominal.
    pub fn margin(&self, h_bar: &DVector<f64>) -> f64 {
        -psi(h_bar, self)
    }
}

/// `Ψ = ‖h̄ − c̃‖² − R²`.
pub fn psi(h_bar: &DVector<f64>, model: &SphereModel) -> f64 {
    (h_bar - &model.center).norm_squared() - model.r_squared
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
    model: &SphereModel,
    embeddings: &[DVector<f64>],
    lambda: f64,
    slack: impl Fn(f64) -> f64,
) -> Result<f64> {
    check_embeddings(model.center.len(), embeddings)?;
    let n = embeddings.len() as f64;
    let total: f64 = embeddings.iter().map(|h| slack(psi(h, model))).sum();
    Ok(model.r_squared + total / (n * lambda))
}

/// Smoothed objective `F_τ(c̃, R²)`.
pub fn primal_objective(model: &SphereModel, embeddings: &[DVector<f64>], cfg: &SmoothingConfig) -> Result<f64> {
    cfg.validate()?;
    objective_with(model, embeddings, cfg.lambda, |p| smooth_hinge(p, cfg.tau))
}

/// Exact hinge objective `F(c̃, R²)`.
pub fn exact_objective(model: &SphereModel, embeddings: &[DVector<f64>], lambda: f64) -> Result<f64> {
    objective_with(model, embeddings, lambda, hinge)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereGradient {
    pub grad_center: DVector<f64>,
    pub grad_r_squared: f64,
    /// `∂F_τ/∂h̄ᵢ = 2σ(τΨᵢ)(h̄ᵢ − c̃)/(nλ)`.
    pub upstream: Vec<DVector<f64>>,
}

pub fn primal_gradients(
    model: &SphereModel,
    embeddings: &[DVector<f64>],
    cfg: &SmoothingConfig,
) -> Result<SphereGradient> {
    cfg.validate()?;
    check_embeddings(model.center.len(), embeddings)?;
    let scale = 1.0 / (embeddings.len() as f64 * cfg.lambda);
    let mut grad_center = DVector::zeros(model.center.len());
    let mut sig_sum = 0.0;
    let mut upstream = Vec::with_capacity(embeddings.len());
    for h in embeddings {
        let diff = h - &model.center;
        let sig = sigmoid(cfg.tau * (diff.norm_squared() - model.r_squared));
        sig_sum += sig;
        grad_center.axpy(-2.0 * scale * sig, &diff, 1.0);
        upstream.push(diff * (2.0 * scale * sig));
    }
    Ok(SphereGradient {
        grad_center,
        grad_r_squared: 1.0 - scale * sig_sum,
        upstream,
    })
}

pub fn score_sphere(model: &SphereModel, h_bar: &DVector<f64>) -> Label {
    Label::from_margin(model.margin(h_bar))
}

/// `αᵀKα − Σ αᵢKᵢᵢ`.
pub fn dual_objective(alpha: &DualSolution, gram: &DMatrix<f64>) -> Result<f64> {
    validate_gram(gram, alpha.len())?;
    Ok(SvddDual.objective(gram, &alpha.alpha))
}

/// Pair rule for `αᵀKα − Σ αᵢKᵢᵢ`:
/// `α_b ← (2s(K_aa − K_ab) + K_bb − K_aa + 2(M_a − M_b)) / (2(K_aa + K_bb − 2K_ab))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SvddDual;

impl PairRule for SvddDual {
    fn objective(&self, gram: &DMatrix<f64>, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        let diag: f64 = alpha.iter().enumerate().map(|(i, x)| x * gram[(i, i)]).sum();
        a.dot(&(gram * &a)) - diag
    }

    fn pair_optimum(&self, gram: &DMatrix<f64>, alpha: &[f64], k_alpha: &[f64], a: usize, b: usize) -> Option<f64> {
        let denom = flat_pair(gram, a, b)?;
        let s = alpha[a] + alpha[b];
        let m_a = partial_sum(gram, alpha, k_alpha, a, b);
        let m_b = partial_sum(gram, alpha, k_alpha, b, a);
        let k_aa = gram[(a, a)];
        let k_bb = gram[(b, b)];
        Some((2.0 * s * (k_aa - gram[(a, b)]) + k_bb - k_aa + 2.0 * (m_a - m_b)) / (2.0 * denom))
    }
}

pub fn smo_sweep(alpha: &DualSolution, gram: &DMatrix<f64>) -> Result<DualSolution> {
    Ok(dual::smo_sweep(&SvddDual, alpha, gram)?)
}

pub fn solve_dual(init: &DualSolution, gram: &DMatrix<f64>, tol: f64, max_sweeps: usize) -> Result<SmoOutcome> {
    Ok(dual::smo_solve(&SvddDual, init, gram, tol, max_sweeps)?)
}

/// Per-row squared distance `Kᵢᵢ − 2(Kα)ᵢ + αᵀKα` from the dual center.
fn center_distances(alpha: &DualSolution, gram: &DMatrix<f64>) -> Vec<f64> {
    let a = alpha.as_vector();
    let k_alpha = gram * &a;
    let quad = a.dot(&k_alpha);
    (0..alpha.len())
        .map(|i| gram[(i, i)] - 2.0 * k_alpha[i] + quad)
        .collect()
}

/// `R²` averaged over the center distances of every interior multiplier.
pub fn recover_r_squared(alpha: &DualSolution, gram: &DMatrix<f64>) -> Result<f64> {
    validate_gram(gram, alpha.len())?;
    let interior = alpha.interior();
    if interior.is_empty() {
        return Err(DualError::NoMarginVector.into());
    }
    let d = center_distances(alpha, gram);
    Ok(interior.iter().map(|&i| d[i]).sum::<f64>() / interior.len() as f64)
}

/// Midpoint of the `R²` interval allowed by the KKT conditions when no
/// multiplier is interior: `R² ≤ dᵢ` at the upper bound, `R² ≥ dᵢ` at zero.
pub fn r_squared_from_kkt_bounds(alpha: &DualSolution, gram: &DMatrix<f64>) -> Result<f64> {
    validate_gram(gram, alpha.len())?;
    let d = center_distances(alpha, gram);
    let u = alpha.upper_bound();
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for (i, &a) in alpha.alpha.iter().enumerate() {
        if a >= u - INTERIOR_MARGIN {
            upper = upper.min(d[i]);
        }
        if a <= INTERIOR_MARGIN {
            lower = lower.max(d[i]);
        }
    }
    let r2 = match (lower.is_finite(), upper.is_finite()) {
        (true, true) => 0.5 * (lower + upper),
        (true, false) => lower,
        (false, true) => upper,
        (false, false) => d.iter().sum::<f64>() / d.len() as f64,
    };
    Ok(r2.max(0.0))
}

/// `R² − αᵀKα + 2Σ αⱼ K_j − self_k`, with `gram_row[j] = h̄ⱼᵀh̄` and
/// `self_k = h̄ᵀh̄`.
pub fn dual_margin(alpha: &DualSolution, r_squared: f64, gram: &DMatrix<f64>, gram_row: &[f64], self_k: f64) -> f64 {
    let a = alpha.as_vector();
    let quad = a.dot(&(gram * &a));
    let cross: f64 = alpha.alpha.iter().zip(gram_row).map(|(x, k)| x * k).sum();
    r_squared - quad + 2.0 * cross - self_k
}

pub fn score_dual(alpha: &DualSolution, r_squared: f64, gram: &DMatrix<f64>, gram_row: &[f64], self_k: f64) -> Label {
    Label::from_margin(dual_margin(alpha, r_squared, gram, gram_row, self_k))
}

/// `c̃ = Σ αᵢ h̄ᵢ`.
pub fn sphere_from_dual(alpha: &DualSolution, embeddings: &[DVector<f64>], r_squared: f64) -> SphereModel {
    let mut center = DVector::zeros(embeddings.first().map_or(0, |h| h.len()));
    for (a, h) in alpha.alpha.iter().zip(embeddings) {
        center.axpy(*a, h, 1.0);
    }
    SphereModel { center, r_squared }
}
