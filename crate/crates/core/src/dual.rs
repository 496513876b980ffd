//! Dual multipliers on the simplex-box `{Σα = 1, 0 ≤ α ≤ 1/(nλ)}` and the
//! SMO pair-sweep driver shared by the hyperplane and hypersphere duals.
//!
//! Each head supplies a [`PairRule`]: the unconstrained minimizer of its dual
//! along the line `α_a + α_b = const`. The driver clips that minimizer to the
//! feasible segment, so every pair update keeps the sum and the box intact
//! and never increases a convex dual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance from a box edge below which a multiplier counts as bound.
pub const INTERIOR_MARGIN: f64 = 1e-8;
const FEASIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum DualError {
    #[error("gram matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("gram matrix is not symmetric (|K_ij - K_ji| = {0:e})")]
    Asymmetric(f64),
    #[error("gram size {gram} does not match {alpha} multipliers")]
    SizeMismatch { gram: usize, alpha: usize },
    #[error("lambda must be positive, got {0}")]
    InvalidLambda(f64),
    #[error("feasible set is empty: n*lambda = {0} > 1 leaves no room for sum(alpha) = 1")]
    EmptyFeasibleSet(f64),
    #[error("multipliers infeasible (violation {0:e})")]
    Infeasible(f64),
    #[error("no multiplier lies strictly inside (0, 1/(n lambda)); no margin vector")]
    NoMarginVector,
    #[error("SMO needs at least two multipliers")]
    TooFew,
    #[error("need at least one sample")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub lambda: f64,
}

impl DualSolution {
    pub fn new(alpha: Vec<f64>, lambda: f64) -> Result<Self, DualError> {
        if alpha.is_empty() {
            return Err(DualError::Empty);
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DualError::InvalidLambda(lambda));
        }
        let sol = Self { alpha, lambda };
        let v = sol.feasibility_error();
        if v > FEASIBILITY_TOL {
            return Err(DualError::Infeasible(v));
        }
        Ok(sol)
    }

    /// `α_i = 1/n`, feasible whenever `λ ≤ 1`.
    pub fn uniform(n: usize, lambda: f64) -> Result<Self, DualError> {
        if n == 0 {
            return Err(DualError::Empty);
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DualError::InvalidLambda(lambda));
        }
        if lambda > 1.0 {
            return Err(DualError::EmptyFeasibleSet(lambda));
        }
        Self::new(vec![1.0 / n as f64; n], lambda)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// `1/(nλ)`.
    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.alpha.len() as f64 * self.lambda)
    }

    /// Largest violation of the sum or box constraints.
    pub fn feasibility_error(&self) -> f64 {
        let u = self.upper_bound();
        let sum: f64 = self.alpha.iter().sum();
        self.alpha
            .iter()
            .map(|&a| (-a).max(a - u).max(0.0))
            .fold((sum - 1.0).abs(), f64::max)
    }

    /// Indices with `margin < α_i < 1/(nλ) − margin`.
    pub fn interior(&self) -> Vec<usize> {
        let u = self.upper_bound();
        self.alpha
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > INTERIOR_MARGIN && a < u - INTERIOR_MARGIN)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }
}

/// Linear-kernel gram matrix `K_ij = h̄_iᵀ h̄_j`.
pub fn gram_matrix(embeddings: &[DVector<f64>]) -> DMatrix<f64> {
    let n = embeddings.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = embeddings[i].dot(&embeddings[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub fn validate_gram(gram: &DMatrix<f64>, n: usize) -> Result<(), DualError> {
    let (r, c) = gram.shape();
    if r != c {
        return Err(DualError::NotSquare(r, c));
    }
    if r != n {
        return Err(DualError::SizeMismatch { gram: r, alpha: n });
    }
    let scale = gram.amax().max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..r {
        for j in i + 1..r {
            worst = worst.max((gram[(i, j)] - gram[(j, i)]).abs());
        }
    }
    if worst > 1e-12 * scale {
        return Err(DualError::Asymmetric(worst));
    }
    Ok(())
}

/// Pair-update formula of a quadratic dual over the simplex-box.
pub trait PairRule {
    /// Dual objective at `alpha`.
    fn objective(&self, gram: &DMatrix<f64>, alpha: &[f64]) -> f64;

    /// Unclipped minimizer for `α_b` along `α_a + α_b = const` with every
    /// other multiplier fixed. `k_alpha` is the current `Kα`. Returns `None`
    /// when the objective is flat along the pair direction.
    fn pair_optimum(&self, gram: &DMatrix<f64>, alpha: &[f64], k_alpha: &[f64], a: usize, b: usize) -> Option<f64>;
}

/// `M_a = Σ_{j ∉ {a,b}} α_j K_aj`, read off the maintained `Kα`.
pub(crate) fn partial_sum(gram: &DMatrix<f64>, alpha: &[f64], k_alpha: &[f64], a: usize, b: usize) -> f64 {
    k_alpha[a] - alpha[a] * gram[(a, a)] - alpha[b] * gram[(a, b)]
}

/// Squared distance `K_aa + K_bb − 2K_ab` below which a pair is treated as
/// flat and skipped.
pub(crate) fn flat_pair(gram: &DMatrix<f64>, a: usize, b: usize) -> Option<f64> {
    let denom = gram[(a, a)] + gram[(b, b)] - 2.0 * gram[(a, b)];
    let scale = gram[(a, a)].abs() + gram[(b, b)].abs();
    if denom <= 1e-14 * scale.max(1e-300) || denom <= 0.0 {
        None
    } else {
        Some(denom)
    }
}

struct SweepState<'a> {
    gram: &'a DMatrix<f64>,
    alpha: Vec<f64>,
    k_alpha: Vec<f64>,
    upper: f64,
}

impl<'a> SweepState<'a> {
    fn new(gram: &'a DMatrix<f64>, sol: &DualSolution) -> Self {
        let k_alpha = (gram * sol.as_vector()).iter().copied().collect();
        Self {
            gram,
            alpha: sol.alpha.clone(),
            k_alpha,
            upper: sol.upper_bound(),
        }
    }

    fn update_pair<R: PairRule>(&mut self, rule: &R, a: usize, b: usize) -> bool {
        let Some(target) = rule.pair_optimum(self.gram, &self.alpha, &self.k_alpha, a, b) else {
            return false;
        };
        if !target.is_finite() {
            return false;
        }
        let s = self.alpha[a] + self.alpha[b];
        let lo = (s - self.upper).max(0.0);
        let hi = self.upper.min(s);
        let new_b = target.clamp(lo, hi);
        let new_a = (s - new_b).clamp(0.0, self.upper);
        let da = new_a - self.alpha[a];
        let db = new_b - self.alpha[b];
        if da == 0.0 && db == 0.0 {
            return false;
        }
        self.alpha[a] = new_a;
        self.alpha[b] = new_b;
        for (i, ka) in self.k_alpha.iter_mut().enumerate() {
            *ka += self.gram[(i, a)] * da + self.gram[(i, b)] * db;
        }
        true
    }

    fn sweep<R: PairRule>(&mut self, rule: &R, observer: &mut impl FnMut(&[f64])) {
        let n = self.alpha.len();
        for a in 0..n {
            for b in a + 1..n {
                if self.update_pair(rule, a, b) {
                    observer(&self.alpha);
                }
            }
        }
    }
}

/// One full sweep over every index pair `(a, b)`, `a < b`, in lexicographic
/// order.
pub fn smo_sweep<R: PairRule>(rule: &R, sol: &DualSolution, gram: &DMatrix<f64>) -> Result<DualSolution, DualError> {
    smo_sweep_observed(rule, sol, gram, |_| {})
}

/// [`smo_sweep`] that reports the multipliers after every pair update that
/// changed them.
pub fn smo_sweep_observed<R: PairRule>(
    rule: &R,
    sol: &DualSolution,
    gram: &DMatrix<f64>,
    mut observer: impl FnMut(&[f64]),
) -> Result<DualSolution, DualError> {
    if sol.len() < 2 {
        return Err(DualError::TooFew);
    }
    validate_gram(gram, sol.len())?;
    let mut state = SweepState::new(gram, sol);
    state.sweep(rule, &mut observer);
    Ok(DualSolution {
        alpha: state.alpha,
        lambda: sol.lambda,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoOutcome {
    pub solution: DualSolution,
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Repeats sweeps until one lowers the objective by less than `tol` (relative
/// to `max(1, |objective|)`) or `max_sweeps` is reached.
pub fn smo_solve<R: PairRule>(
    rule: &R,
    init: &DualSolution,
    gram: &DMatrix<f64>,
    tol: f64,
    max_sweeps: usize,
) -> Result<SmoOutcome, DualError> {
    validate_gram(gram, init.len())?;
    if init.len() == 1 {
        return Ok(SmoOutcome {
            objective: rule.objective(gram, &init.alpha),
            solution: init.clone(),
            sweeps: 0,
            converged: true,
        });
    }
    let mut state = SweepState::new(gram, init);
    let mut objective = rule.objective(gram, &state.alpha);
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        state.sweep(rule, &mut |_| {});
        sweeps += 1;
        let next = rule.objective(gram, &state.alpha);
        let decrease = objective - next;
        objective = next;
        if decrease < tol * objective.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(SmoOutcome {
        solution: DualSolution {
            alpha: state.alpha,
            lambda: init.lambda,
        },
        objective,
        sweeps,
        converged,
    })
}
