//! Linear predictability of SAE reconstruction error.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::numerics::{augment_with_bias, least_squares_fit, r_squared};
use crate::rng::{stream, Stream};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Designs whose singular values spread wider than this get a ridge term.
const CONDITION_LIMIT: f64 = 1e12;

/// A linear probe on `[x; 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    /// `(n + 1) x q`; the last row is the intercept.
    pub coefficients: Array2<f64>,
    pub r2_train: f64,
    pub r2_test: f64,
    /// Held-out R² of each target column; averaged into `r2_test`.
    pub r2_test_per_dim: Vec<f64>,
    pub ridge_used: f64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub split_seed: u64,
}

impl ProbeFit {
    pub fn input_dim(&self) -> usize {
        self.coefficients.nrows() - 1
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(SaeError::dim("probe input width", self.input_dim(), x.ncols()));
        }
        Ok(augment_with_bias(x).dot(&self.coefficients))
    }
}

/// `x - x_hat`.
pub fn sae_error(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.dim() != x_hat.dim() {
        return Err(SaeError::Input(format!(
            "reconstruction shape {:?} differs from input shape {:?}",
            x_hat.dim(),
            x.dim()
        )));
    }
    Ok(&x - &x_hat)
}

/// Seeded shuffle of `0..rows` split into train and test index sets.
pub fn train_test_split(rows: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SaeError::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut stream(seed, Stream::Split));
    let n_train = ((rows as f64) * train_fraction).round() as usize;
    if n_train == 0 || n_train == rows {
        return Err(SaeError::Degenerate(format!(
            "{rows} rows cannot be split into non-empty train and test sets"
        )));
    }
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

fn mean_r2(targets: &Array2<f64>, pred: &Array2<f64>) -> (f64, Vec<f64>) {
    let per: Vec<f64> = (0..targets.ncols())
        .map(|j| r_squared(targets.column(j), pred.column(j)))
        .collect();
    let mean = per.iter().sum::<f64>() / per.len().max(1) as f64;
    (mean, per)
}

/// Least-squares probe from `[x; 1]` to each column of `targets`, fit on
/// the training split and scored on the held-out rows.
pub fn fit_probe(
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    train_fraction: f64,
    split_seed: u64,
) -> Result<ProbeFit> {
    if x.nrows() != targets.nrows() {
        return Err(SaeError::dim("probe target rows", x.nrows(), targets.nrows()));
    }
    let (train, test) = train_test_split(x.nrows(), train_fraction, split_seed)?;
    let n = x.ncols();
    if train.len() < n + 2 {
        return Err(SaeError::Degenerate(format!(
            "probe needs at least {} training rows, have {}",
            n + 2,
            train.len()
        )));
    }
    let design = augment_with_bias(x);
    let d_train = design.select(Axis(0), &train);
    let t_train = targets.select(Axis(0), &train);

    let mut sol = least_squares_fit(d_train.view(), t_train.view(), 0.0)?;
    let mut ridge_used = 0.0;
    if sol.condition_warning || sol.condition_number > CONDITION_LIMIT {
        let p = design.ncols() as f64;
        let trace: f64 = d_train.iter().map(|v| v * v).sum();
        ridge_used = 1e-6 * trace / p;
        log::warn!(
            "probe design is ill-conditioned (cond {:.3e}); refitting with ridge {ridge_used:.3e}",
            sol.condition_number
        );
        sol = least_squares_fit(d_train.view(), t_train.view(), ridge_used)?;
    }
    let coefficients = sol.coefficients;

    let pred_train = d_train.dot(&coefficients);
    let (r2_train, _) = mean_r2(&t_train, &pred_train);
    let d_test = design.select(Axis(0), &test);
    let t_test = targets.select(Axis(0), &test);
    let pred_test = d_test.dot(&coefficients);
    let (r2_test, r2_test_per_dim) = mean_r2(&t_test, &pred_test);

    Ok(ProbeFit {
        coefficients,
        r2_train,
        r2_test,
        r2_test_per_dim,
        ridge_used,
        train_rows: train.len(),
        test_rows: test.len(),
        split_seed,
    })
}

/// Scalar probe predicting `||err||^2` from `x`.
pub fn fit_error_norm_probe(
    x: ArrayView2<f64>,
    err: ArrayView2<f64>,
    train_fraction: f64,
    split_seed: u64,
) -> Result<ProbeFit> {
    if x.dim() != err.dim() {
        return Err(SaeError::Input(format!(
            "error shape {:?} differs from input shape {:?}",
            err.dim(),
            x.dim()
        )));
    }
    let norms: Array1<f64> = err.map_axis(Axis(1), |r| r.dot(&r));
    fit_probe(x, norms.insert_axis(Axis(1)).view(), train_fraction, split_seed)
}

/// Vector probe predicting the full error from `x`; `r2_test` is the mean
/// of per-dimension R².
pub fn fit_error_vector_probe(
    x: ArrayView2<f64>,
    err: ArrayView2<f64>,
    train_fraction: f64,
    split_seed: u64,
) -> Result<ProbeFit> {
    if x.dim() != err.dim() {
        return Err(SaeError::Input(format!(
            "error shape {:?} differs from input shape {:?}",
            err.dim(),
            x.dim()
        )));
    }
    fit_probe(x, err, train_fraction, split_seed)
}

/// `1 - R²(x, x_hat + probe([x; 1]))` with a single pooled R².
pub fn fvu_nonlinear(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, probe: &ProbeFit) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(SaeError::Input(format!(
            "reconstruction shape {:?} differs from input shape {:?}",
            x_hat.dim(),
            x.dim()
        )));
    }
    if probe.coefficients.ncols() != x.ncols() {
        return Err(SaeError::dim("vector probe outputs", x.ncols(), probe.coefficients.ncols()));
    }
    let x_tilde = &x_hat + &probe.predict(x)?;
    let mean = x.mean_axis(Axis(0)).ok_or_else(|| SaeError::Degenerate("empty batch".into()))?;
    let ss_tot: f64 = x.rows().into_iter().map(|r| (&r - &mean).mapv(|v| v * v).sum()).sum();
    if ss_tot == 0.0 {
        return Err(SaeError::Degenerate("inputs have zero total variance".into()));
    }
    let ss_res: f64 = (&x - &x_tilde).iter().map(|v| v * v).sum();
    Ok(ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarkMatterReport {
    pub r2_norm_probe: f64,
    pub r2_vector_probe_mean: f64,
    pub fvu_nonlinear: f64,
    pub split_seed: u64,
    pub ridge_used: f64,
    pub r2_norm_probe_train: f64,
    pub r2_vector_probe_mean_train: f64,
    pub test_rows: usize,
}

/// Both probes plus the nonlinear FVU, scored on the held-out rows.
pub fn analyze(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, split_seed: u64) -> Result<DarkMatterReport> {
    let err = sae_error(x, x_hat)?;
    let norm = fit_error_norm_probe(x, err.view(), DEFAULT_TRAIN_FRACTION, split_seed)?;
    let vector = fit_error_vector_probe(x, err.view(), DEFAULT_TRAIN_FRACTION, split_seed)?;
    let (_, test) = train_test_split(x.nrows(), DEFAULT_TRAIN_FRACTION, split_seed)?;
    let x_test = x.select(Axis(0), &test);
    let hat_test = x_hat.select(Axis(0), &test);
    let fvu = fvu_nonlinear(x_test.view(), hat_test.view(), &vector)?;
    Ok(DarkMatterReport {
        r2_norm_probe: norm.r2_test,
        r2_vector_probe_mean: vector.r2_test,
        fvu_nonlinear: fvu,
        split_seed,
        ridge_used: norm.ridge_used.max(vector.ridge_used),
        r2_norm_probe_train: norm.r2_train,
        r2_vector_probe_mean_train: vector.r2_train,
        test_rows: test.len(),
    })
}

/// Planted residuals with known linear and nonlinear content.
pub mod planted {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    /// `(x^2 - 1) / sqrt 2` elementwise: unit variance, uncorrelated with
    /// any affine function of a standard normal `x`.
    pub fn symmetric_nonlinear(x: ArrayView2<f64>) -> Array2<f64> {
        x.mapv(|v| (v * v - 1.0) / std::f64::consts::SQRT_2)
    }

    /// Residual `alpha * L x + sqrt(1 - alpha^2) * g(x)` and the matching
    /// reconstruction `x - err`. `L` is a random orthogonal-ish map scaled
    /// to unit gain so both parts carry comparable variance.
    pub fn mixed_residual(x: ArrayView2<f64>, alpha: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let n = x.ncols();
        let l = gaussian(n, n, seed) / (n as f64).sqrt();
        let lin = x.dot(&l.t());
        let err = lin * alpha + symmetric_nonlinear(x) * (1.0 - alpha * alpha).max(0.0).sqrt();
        let x_hat = &x - &err;
        (err, x_hat)
    }
}
