//! Orthogonality-preserving updates on the Stiefel manifold.
//!
//! Recurrent weight blocks are kept on `{W : WᵀW = I}` and bias vectors on the
//! unit sphere. Updates use the Cayley transform
//!
//! ```text
//! A  = G Wᵀ − W Gᵀ
//! W' = (I + μ/2 A)⁻¹ (I − μ/2 A) W
//! ```
//!
//! which maps the manifold to itself for any skew-symmetric `A`.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::seeded;

/// Drift above which a point is re-orthonormalized after a step.
pub const REORTHONORMALIZE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum StiefelError {
    #[error("manifold point needs rows >= cols, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("gradient shape {found:?} does not match point shape {expected:?}")]
    GradientShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("orthogonality error {error:e} exceeds tolerance {tolerance:e}")]
    NotOnManifold { error: f64, tolerance: f64 },
    #[error("step size must be finite and non-negative, got {0}")]
    InvalidStep(f64),
    #[error("Cayley system (I + mu/2 A) is singular")]
    Singular,
}

/// A matrix with (numerically) orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    value: DMatrix<f64>,
    tolerance: f64,
}

impl ManifoldPoint {
    pub fn new(value: DMatrix<f64>, tolerance: f64) -> Result<Self, StiefelError> {
        if value.nrows() < value.ncols() || value.ncols() == 0 {
            return Err(StiefelError::Shape {
                rows: value.nrows(),
                cols: value.ncols(),
            });
        }
        let error = orthogonality_error(&value);
        if error.is_nan() || error > tolerance {
            return Err(StiefelError::NotOnManifold { error, tolerance });
        }
        Ok(Self { value, tolerance })
    }

    pub fn value(&self) -> &DMatrix<f64> {
        &self.value
    }

    pub fn into_value(self) -> DMatrix<f64> {
        self.value
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }
}

/// `‖WᵀW − I‖_F`.
pub fn orthogonality_error(w: &DMatrix<f64>) -> f64 {
    let gram = w.transpose() * w;
    let mut sum = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            let d = gram[(i, j)] - target;
            sum += d * d;
        }
    }
    sum.sqrt()
}

/// Thin QR factor with columns sign-normalized so that `diag(R) ≥ 0`.
pub fn orthonormalize(w: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = w.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orthonormal `rows × cols` matrix from the QR factor of a seeded Gaussian
/// matrix.
pub fn init_orthogonal(rows: usize, cols: usize, seed: u64) -> Result<ManifoldPoint, StiefelError> {
    if rows < cols || cols == 0 {
        return Err(StiefelError::Shape { rows, cols });
    }
    let mut rng = seeded(seed);
    let gaussian = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let q = orthonormalize(&gaussian);
    Ok(ManifoldPoint {
        value: q,
        tolerance: REORTHONORMALIZE_THRESHOLD,
    })
}

/// One Cayley step along the negative Euclidean gradient `grad`.
pub fn cayley_step(
    point: &ManifoldPoint,
    grad: &DMatrix<f64>,
    mu: f64,
) -> Result<ManifoldPoint, StiefelError> {
    let w = &point.value;
    if grad.shape() != w.shape() {
        return Err(StiefelError::GradientShape {
            expected: w.shape(),
            found: grad.shape(),
        });
    }
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(StiefelError::InvalidStep(mu));
    }
    if mu == 0.0 || grad.iter().all(|&g| g == 0.0) {
        return Ok(point.clone());
    }
    let value = cayley_transform(w, grad, mu)?;
    let value = if orthogonality_error(&value) > REORTHONORMALIZE_THRESHOLD {
        orthonormalize(&value)
    } else {
        value
    };
    Ok(ManifoldPoint {
        value,
        tolerance: point.tolerance,
    })
}

/// The bare Cayley map `(I + μ/2 A)⁻¹ (I − μ/2 A) W` without the drift repair
/// that [`cayley_step`] applies. Exposed so accumulated round-off can be
/// measured directly.
pub fn cayley_transform(w: &DMatrix<f64>, grad: &DMatrix<f64>, mu: f64) -> Result<DMatrix<f64>, StiefelError> {
    if grad.shape() != w.shape() {
        return Err(StiefelError::GradientShape {
            expected: w.shape(),
            found: grad.shape(),
        });
    }
    let r = w.nrows();
    let a = grad * w.transpose() - w * grad.transpose();
    let half = 0.5 * mu;
    let identity = DMatrix::<f64>::identity(r, r);
    let lhs = &identity + &a * half;
    let rhs = (&identity - &a * half) * w;
    let out = lhs.lu().solve(&rhs).ok_or(StiefelError::Singular)?;
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(StiefelError::Singular)
    }
}

/// Cayley update for a parameter block of any orientation.
///
/// Wide blocks (`rows < cols`) carry the constraint on their rows, `W Wᵀ = I`,
/// and are stepped through their transpose.
pub fn update_block(w: &DMatrix<f64>, grad: &DMatrix<f64>, mu: f64) -> Result<DMatrix<f64>, StiefelError> {
    if w.nrows() >= w.ncols() {
        let point = ManifoldPoint {
            value: w.clone(),
            tolerance: f64::INFINITY,
        };
        Ok(cayley_step(&point, grad, mu)?.into_value())
    } else {
        let point = ManifoldPoint {
            value: w.transpose(),
            tolerance: f64::INFINITY,
        };
        Ok(cayley_step(&point, &grad.transpose(), mu)?
            .into_value()
            .transpose())
    }
}

/// Orthogonality error measured on the short side of a block.
pub fn block_orthogonality_error(w: &DMatrix<f64>) -> f64 {
    if w.nrows() >= w.ncols() {
        orthogonality_error(w)
    } else {
        orthogonality_error(&w.transpose())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn init_square_is_orthogonal() {
        let w = init_orthogonal(3, 3, 1).unwrap();
        assert!(orthogonality_error(w.value()) <= 1e-12);
    }

    #[test]
    fn init_column_is_unit_vector() {
        let w = init_orthogonal(4, 1, 2).unwrap();
        assert_relative_eq!(w.value().norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_orthogonal(5, 3, 9).unwrap(), init_orthogonal(5, 3, 9).unwrap());
        assert_ne!(init_orthogonal(5, 3, 9).unwrap(), init_orthogonal(5, 3, 10).unwrap());
    }

    #[test]
    fn init_rejects_wide_shape() {
        assert_eq!(
            init_orthogonal(2, 3, 0).unwrap_err(),
            StiefelError::Shape { rows: 2, cols: 3 }
        );
    }

    #[test]
    fn zero_gradient_is_identity() {
        let w = init_orthogonal(4, 2, 3).unwrap();
        let out = cayley_step(&w, &DMatrix::zeros(4, 2), 0.5).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn step_preserves_orthogonality() {
        let w = init_orthogonal(5, 3, 4).unwrap();
        let g = random(5, 3, 5);
        let out = cayley_step(&w, &g, 0.05).unwrap();
        assert!(orthogonality_error(out.value()) <= 1e-10);
    }

    #[test]
    fn two_by_two_matches_direct_inverse() {
        // W = I, G = [[0,1],[-1,0]], mu = 2  =>  A = 2G, W' = (I + 2G)^-1 (I - 2G)
        let w = ManifoldPoint::new(DMatrix::identity(2, 2), 1e-12).unwrap();
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let out = cayley_step(&w, &g, 2.0).unwrap();
        // I + 2G = [[1,2],[-2,1]], inverse = [[1,-2],[2,1]]/5
        // I - 2G = [[1,-2],[2,1]]
        // product = [[1-4, -2-2],[2+2, -4+1]]/5 = [[-3,-4],[4,-3]]/5
        let expected = DMatrix::from_row_slice(2, 2, &[-0.6, -0.8, 0.8, -0.6]);
        assert_relative_eq!(out.value(), &expected, epsilon = 1e-14);
    }

    #[test]
    fn orthogonality_error_examples() {
        assert_eq!(orthogonality_error(&DMatrix::identity(3, 3)), 0.0);
        let two_i = DMatrix::identity(2, 2) * 2.0;
        assert_relative_eq!(orthogonality_error(&two_i), 3.0 * 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn cayley_factor_is_orthogonal_for_skew_a() {
        for seed in 0..5 {
            let b = random(5, 5, 100 + seed);
            let a = &b - b.transpose();
            let i = DMatrix::<f64>::identity(5, 5);
            let q = (&i + &a * 0.3).lu().solve(&(&i - &a * 0.3)).unwrap();
            assert!(orthogonality_error(&q) < 1e-12);
        }
    }

    #[test]
    fn small_step_decreases_quadratic() {
        // f(W) = 0.5 ||W - T||_F^2 with gradient W - T
        let w = init_orthogonal(4, 2, 7).unwrap();
        let target = random(4, 2, 8);
        let f = |m: &DMatrix<f64>| 0.5 * (m - &target).norm_squared();
        let g = w.value() - &target;
        let out = cayley_step(&w, &g, 1e-3).unwrap();
        assert!(f(out.value()) < f(w.value()));
    }

    #[test]
    fn wide_block_goes_through_transpose() {
        let w = init_orthogonal(5, 2, 1).unwrap().into_value().transpose();
        let g = random(2, 5, 2);
        let out = update_block(&w, &g, 0.1).unwrap();
        assert!(block_orthogonality_error(&out) < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = init_orthogonal(3, 2, 1).unwrap();
        assert!(matches!(
            cayley_step(&w, &DMatrix::zeros(2, 3), 0.1),
            Err(StiefelError::GradientShape { .. })
        ));
        assert_eq!(
            cayley_step(&w, &DMatrix::zeros(3, 2), -1.0).unwrap_err(),
            StiefelError::InvalidStep(-1.0)
        );
        assert!(matches!(
            ManifoldPoint::new(DMatrix::identity(2, 2) * 2.0, 1e-6),
            Err(StiefelError::NotOnManifold { .. })
        ));
    }
}
