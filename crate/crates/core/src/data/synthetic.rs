//! Planted-dictionary activations with known sparse codes.
//!
//! Rows are generated exactly as `x = x0 + sum_i c_i d_i` with unit-norm
//! directions `d_i` and non-negative coefficients, so a trained SAE can be
//! scored against the dictionary that produced its data.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ActivationBatch;
use crate::error::{Result, SaeError};
use crate::rng::{stream, Stream};

/// Generator parameters; enough to rebuild a [`SyntheticGroundTruth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m_true: usize,
    pub k_active: f64,
    #[serde(default = "default_coeff_low")]
    pub coeff_low: f64,
    #[serde(default = "default_coeff_high")]
    pub coeff_high: f64,
    #[serde(default = "default_offset_norm")]
    pub offset_norm: f64,
    pub seed: u64,
}

fn default_coeff_low() -> f64 {
    0.5
}
fn default_coeff_high() -> f64 {
    1.5
}
fn default_offset_norm() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(n: usize, m_true: usize, k_active: f64, seed: u64) -> Self {
        SyntheticSpec {
            n,
            m_true,
            k_active,
            coeff_low: default_coeff_low(),
            coeff_high: default_coeff_high(),
            offset_norm: default_offset_norm(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGroundTruth {
    /// `n x M_true`, unit-norm columns.
    pub dictionary: Array2<f64>,
    pub x0: Array1<f64>,
    pub spec: SyntheticSpec,
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

fn unit(mut v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    v /= norm;
    v
}

pub fn synth_ground_truth(n: usize, m_true: usize, k_active: f64, seed: u64) -> Result<SyntheticGroundTruth> {
    SyntheticGroundTruth::from_spec(SyntheticSpec::new(n, m_true, k_active, seed))
}

impl SyntheticGroundTruth {
    pub fn from_spec(spec: SyntheticSpec) -> Result<Self> {
        if spec.n == 0 || spec.m_true == 0 {
            return Err(SaeError::Config(format!(
                "synthetic dictionary must be at least 1x1, got {}x{}",
                spec.n, spec.m_true
            )));
        }
        if !(spec.k_active >= 0.0 && spec.k_active <= spec.m_true as f64) {
            return Err(SaeError::Config(format!(
                "k_active must lie in [0, {}], got {}",
                spec.m_true, spec.k_active
            )));
        }
        if !(spec.coeff_low >= 0.0 && spec.coeff_high > spec.coeff_low) {
            return Err(SaeError::Config(format!(
                "coefficient range [{}, {}) is invalid",
                spec.coeff_low, spec.coeff_high
            )));
        }
        let mut rng = stream(spec.seed, Stream::Dictionary);
        let mut dictionary = Array2::zeros((spec.n, spec.m_true));
        for mut col in dictionary.columns_mut() {
            col.assign(&unit(gaussian_vector(&mut rng, spec.n)));
        }
        let x0 = unit(gaussian_vector(&mut rng, spec.n)) * spec.offset_norm;
        Ok(SyntheticGroundTruth { dictionary, x0, spec })
    }

    pub fn n(&self) -> usize {
        self.dictionary.nrows()
    }

    pub fn m_true(&self) -> usize {
        self.dictionary.ncols()
    }

    pub fn activation_probability(&self) -> f64 {
        self.spec.k_active / self.m_true() as f64
    }

    /// Sparse non-negative codes, `count x M_true`.
    pub fn sample_coefficients(&self, rng: &mut ChaCha8Rng, count: usize) -> Array2<f64> {
        let p = self.activation_probability();
        let (lo, hi) = (self.spec.coeff_low, self.spec.coeff_high);
        let mut coeffs = Array2::zeros((count, self.m_true()));
        for v in coeffs.iter_mut() {
            if rng.random::<f64>() < p {
                *v = rng.random_range(lo..hi);
            }
        }
        coeffs
    }

    /// `x0 + D c` for each row of `coeffs`.
    pub fn compose(&self, coeffs: &Array2<f64>) -> Array2<f64> {
        coeffs.dot(&self.dictionary.t()) + &self.x0
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, count: usize) -> (Array2<f64>, Array2<f64>) {
        let coeffs = self.sample_coefficients(rng, count);
        (self.compose(&coeffs), coeffs)
    }
}

/// `count` rows from the stream seeded by `seed`, with their true codes.
pub fn synth_generate(
    gt: &SyntheticGroundTruth,
    count: usize,
    seed: u64,
) -> Result<(ActivationBatch, Array2<f64>)> {
    if count == 0 {
        return Err(SaeError::Degenerate("cannot generate an empty batch".into()));
    }
    let mut rng = stream(seed, Stream::Coefficients);
    let (rows, coeffs) = gt.sample(&mut rng, count);
    let batch = ActivationBatch::new(rows, format!("synthetic:{}", gt.spec.seed))?;
    Ok((batch, coeffs))
}

/// Mean number of non-zero coefficients per row.
pub fn mean_active(coeffs: &Array2<f64>) -> f64 {
    coeffs
        .map_axis(Axis(1), |r| r.iter().filter(|v| **v != 0.0).count() as f64)
        .mean()
        .unwrap_or(0.0)
}
