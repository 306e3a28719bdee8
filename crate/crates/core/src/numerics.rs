//! Dense least squares and R².

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Result, SaeError};

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSolution {
    /// `p x q`: one column of coefficients per target column.
    pub coefficients: Array2<f64>,
    pub residual_sum_squares: f64,
    /// Set when an unregularized system was rank deficient and the
    /// minimum-norm solution was returned.
    pub condition_warning: bool,
    pub rank: usize,
    /// Ratio of largest to smallest singular value of the design.
    pub condition_number: f64,
}

fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// `m = U diag(sigma) V^T`, verified by reconstruction.
///
/// nalgebra's SVD occasionally returns an inaccurate factorization for
/// nearly singular upper-triangular input, while the transpose of the same
/// matrix factors cleanly, so the transpose is tried first.
fn checked_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let t = m.transpose().svd(true, true);
    let (u_t, vt_t) = (t.u.expect("requested U"), t.v_t.expect("requested V^T"));
    let u = vt_t.transpose();
    let v_t = u_t.transpose();
    if (&u * DMatrix::from_diagonal(&t.singular_values) * &v_t - m).norm() <= tol {
        return Ok((u, t.singular_values, v_t));
    }
    let d = m.clone().svd(true, true);
    let (u, v_t) = (d.u.expect("requested U"), d.v_t.expect("requested V^T"));
    if (&u * DMatrix::from_diagonal(&d.singular_values) * &v_t - m).norm() <= tol {
        return Ok((u, d.singular_values, v_t));
    }
    Err(SaeError::Numeric("singular value decomposition did not converge".into()))
}

/// Minimize `||design W - targets||^2 + ridge ||W||^2`.
///
/// Solved through a thin QR of the design followed by an SVD of the
/// triangular factor, so the normal equations are never formed. With
/// `ridge = 0` small singular values are truncated, which yields the
/// minimum-norm solution for rank-deficient designs.
pub fn least_squares_fit(
    design: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    ridge: f64,
) -> Result<LeastSquaresSolution> {
    let (rows, p) = design.dim();
    if rows == 0 || p == 0 {
        return Err(SaeError::Degenerate("empty design matrix".into()));
    }
    if targets.nrows() != rows {
        return Err(SaeError::dim("least-squares targets", rows, targets.nrows()));
    }
    if !(ridge >= 0.0) {
        return Err(SaeError::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    if design.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(SaeError::Numeric("non-finite least-squares input".into()));
    }

    let x = to_na(design);
    let t = to_na(targets);
    // Reduce to a square-or-wide factor `core` with `core^T core = x^T x`
    // and the matching projected targets.
    let (core, projected) = if rows >= p {
        let qr = x.qr();
        let q = qr.q();
        let r = qr.r();
        (r, q.transpose() * &t)
    } else {
        (x.clone(), t.clone())
    };
    let (u, sigma, v_t) = checked_svd(&core)?;
    let s_max = sigma.iter().cloned().fold(0.0, f64::max);
    let tol = s_max * rows.max(p) as f64 * f64::EPSILON;
    let mut rank = 0;
    let mut rank_deficient = false;
    let ut_proj = u.transpose() * &projected;
    let mut scaled = ut_proj.clone();
    for (k, &s) in sigma.iter().enumerate() {
        let factor = if ridge > 0.0 {
            s / (s * s + ridge)
        } else if s > tol {
            1.0 / s
        } else {
            rank_deficient = true;
            0.0
        };
        if s > tol {
            rank += 1;
        }
        scaled.row_mut(k).scale_mut(factor);
    }
    if sigma.len() < p && ridge == 0.0 {
        rank_deficient = true;
    }
    let s_min = if sigma.len() < p {
        0.0
    } else {
        sigma.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let condition_number = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    let w = v_t.transpose() * scaled;
    let coefficients = Array2::from_shape_fn((p, targets.ncols()), |(i, j)| w[(i, j)]);
    let resid = design.dot(&coefficients) - targets;
    let rss = resid.iter().map(|r| r * r).sum();
    Ok(LeastSquaresSolution {
        coefficients,
        residual_sum_squares: rss,
        condition_warning: rank_deficient,
        rank,
        condition_number,
    })
}

/// `1 - SS_res / SS_tot`; zero-variance targets give 0.
pub fn r_squared(targets: ArrayView1<f64>, predictions: ArrayView1<f64>) -> f64 {
    let n = targets.len();
    if n == 0 {
        return 0.0;
    }
    let mean = targets.sum() / n as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return 0.0;
    }
    let ss_res: f64 = targets
        .iter()
        .zip(predictions.iter())
        .map(|(t, p)| (t - p).powi(2))
        .sum();
    1.0 - ss_res / ss_tot
}

/// `[x; 1]`: the design with a trailing intercept column.
pub fn augment_with_bias(x: ArrayView2<f64>) -> Array2<f64> {
    let (b, n) = x.dim();
    let mut out = Array2::ones((b, n + 1));
    out.slice_mut(ndarray::s![.., ..n]).assign(&x);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array, Array1, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn consistent_square_system_is_solved_exactly() {
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let w = array![[1.0], [-2.0]];
        let t = a.dot(&w);
        let sol = least_squares_fit(a.view(), t.view(), 0.0).unwrap();
        assert!(sol.residual_sum_squares < 1e-18);
        assert!((sol.coefficients[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((sol.coefficients[[1, 0]] + 2.0).abs() < 1e-9);
        assert!(!sol.condition_warning);
        assert_eq!(sol.rank, 2);
    }

    #[test]
    fn planted_coefficient_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 40, 5);
        let t = (&x.column(0) * 2.0).insert_axis(Axis(1));
        let sol = least_squares_fit(x.view(), t.view(), 0.0).unwrap();
        assert!((sol.coefficients[[0, 0]] - 2.0).abs() < 1e-9);
        for i in 1..5 {
            assert!(sol.coefficients[[i, 0]].abs() < 1e-9);
        }
    }

    #[test]
    fn ridge_shrinks_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 30, 4);
        let t = random(&mut rng, 30, 2);
        let mut prev = f64::INFINITY;
        for ridge in [0.0, 0.1, 1.0, 10.0, 1e3, 1e6, 1e9] {
            let sol = least_squares_fit(x.view(), t.view(), ridge).unwrap();
            let norm = sol.coefficients.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= prev + 1e-12);
            prev = norm;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 25, 3);
        let t = random(&mut rng, 25, 2);
        let ridge = 0.7;
        let sol = least_squares_fit(x.view(), t.view(), ridge).unwrap();
        // (X^T X + r I) W should equal X^T T.
        let lhs = (x.t().dot(&x) + Array2::<f64>::eye(3) * ridge).dot(&sol.coefficients);
        let rhs = x.t().dot(&t);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_gives_minimum_norm_and_warning() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random(&mut rng, 20, 2);
        let mut x = Array2::zeros((20, 3));
        x.column_mut(0).assign(&base.column(0));
        x.column_mut(1).assign(&base.column(1));
        x.column_mut(2).assign(&base.column(0));
        let t = (&base.column(0) * 4.0).insert_axis(Axis(1));
        let sol = least_squares_fit(x.view(), t.view(), 0.0).unwrap();
        assert!(sol.condition_warning);
        assert_eq!(sol.rank, 2);
        // The minimum-norm split puts 2 on each duplicated column.
        assert!((sol.coefficients[[0, 0]] - 2.0).abs() < 1e-8);
        assert!((sol.coefficients[[2, 0]] - 2.0).abs() < 1e-8);
        assert!(sol.residual_sum_squares < 1e-16);
    }

    #[test]
    fn wide_design_is_handled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 6);
        let t = random(&mut rng, 3, 1);
        let sol = least_squares_fit(x.view(), t.view(), 0.0).unwrap();
        assert!(sol.residual_sum_squares < 1e-18);
        assert!(sol.condition_warning);
    }

    #[test]
    fn residual_is_orthogonal_to_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 200, 7) * 5.0;
        let t = random(&mut rng, 200, 3);
        let sol = least_squares_fit(x.view(), t.view(), 0.0).unwrap();
        let resid = x.dot(&sol.coefficients) - &t;
        let scale = x.iter().map(|v| v * v).sum::<f64>().sqrt() * t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = x.t().dot(&resid);
        assert!(g.iter().all(|v| v.abs() < 1e-8 * scale));
    }

    #[test]
    fn r_squared_cases() {
        let t = array![1.0, 2.0, 3.0, 4.0];
        assert_eq!(r_squared(t.view(), t.view()), 1.0);
        let mean = Array1::from_elem(4, 2.5);
        assert_eq!(r_squared(t.view(), mean.view()), 0.0);
        let anti = array![4.0, 3.0, 2.0, 1.0];
        assert!(r_squared(t.view(), anti.view()) < 0.0);
        let flat = Array1::from_elem(4, 3.0);
        assert_eq!(r_squared(flat.view(), t.view()), 0.0);
    }

    #[test]
    fn r_squared_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Array1::from_shape_fn(50, |_| rng.random_range(-1.0..1.0));
        let p = &t + &Array1::from_shape_fn(50, |_| rng.random_range(-0.3..0.3));
        let base = r_squared(t.view(), p.view());
        let (a, b) = (-3.5, 12.0);
        let t2 = t.mapv(|v| a * v + b);
        let p2 = p.mapv(|v| a * v + b);
        assert!((r_squared(t2.view(), p2.view()) - base).abs() < 1e-12);
    }
}
