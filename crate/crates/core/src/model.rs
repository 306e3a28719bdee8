//! The JumpReLU sparse autoencoder.
//!
//! ```text
//! pre(x)  = W_enc x + b_enc
//! f(x)    = pre(x) * H(pre(x) - theta)        H(0) = 0
//! x_hat   = W_dec f + b_dec
//! loss    = mean ||x - x_hat||^2 + lambda * (mean_l0 / l0_target - 1)^2
//! ```
//!
//! Batches are row-major: one activation vector per row.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};

/// Encoder/decoder weights and per-feature thresholds.
///
/// `w_enc` is `M x n`, `w_dec` is `n x M` (column `i` is feature direction
/// `d_i`), `b_dec` is the offset the dictionary is expressed around.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub theta: Array1<f64>,
}

/// Loss components for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub total: f64,
    pub mean_l0: f64,
}

/// Intermediate values of a forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pre: Array2<f64>,
    pub codes: Array2<f64>,
    pub recon: Array2<f64>,
}

#[inline]
pub fn heaviside(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn jumprelu(z: f64, theta: f64) -> f64 {
    if z > theta {
        z
    } else {
        0.0
    }
}

impl SaeParams {
    pub fn new(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        theta: Array1<f64>,
    ) -> Result<Self> {
        let mut params = SaeParams {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            theta,
        };
        params.validate()?;
        params.standardize();
        Ok(params)
    }

    /// Re-lay weight matrices out in row-major order so they can be viewed
    /// as flat slices.
    pub(crate) fn standardize(&mut self) {
        if !self.w_enc.is_standard_layout() {
            self.w_enc = self.w_enc.as_standard_layout().into_owned();
        }
        if !self.w_dec.is_standard_layout() {
            self.w_dec = self.w_dec.as_standard_layout().into_owned();
        }
    }

    /// All-zero weights with a uniform threshold.
    pub fn zeros(n: usize, m: usize, theta: f64) -> Self {
        SaeParams {
            w_enc: Array2::zeros((m, n)),
            b_enc: Array1::zeros(m),
            w_dec: Array2::zeros((n, m)),
            b_dec: Array1::zeros(n),
            theta: Array1::from_elem(m, theta),
        }
    }

    /// Input dimension `n`.
    pub fn n(&self) -> usize {
        self.w_dec.nrows()
    }

    /// Dictionary width `M`.
    pub fn m(&self) -> usize {
        self.w_dec.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.w_dec.dim();
        if n == 0 || m == 0 {
            return Err(SaeError::Config(format!(
                "dictionary must be at least 1x1, got {n}x{m}"
            )));
        }
        if self.w_enc.dim() != (m, n) {
            return Err(SaeError::Config(format!(
                "w_enc is {:?}, expected ({m}, {n})",
                self.w_enc.dim()
            )));
        }
        if self.b_enc.len() != m {
            return Err(SaeError::dim("b_enc", m, self.b_enc.len()));
        }
        if self.b_dec.len() != n {
            return Err(SaeError::dim("b_dec", n, self.b_dec.len()));
        }
        if self.theta.len() != m {
            return Err(SaeError::dim("theta", m, self.theta.len()));
        }
        if let Some(i) = self.theta.iter().position(|&t| !(t > 0.0)) {
            return Err(SaeError::Config(format!(
                "theta[{i}] = {} is not strictly positive",
                self.theta[i]
            )));
        }
        let finite = self.w_enc.iter().all(|v| v.is_finite())
            && self.b_enc.iter().all(|v| v.is_finite())
            && self.w_dec.iter().all(|v| v.is_finite())
            && self.b_dec.iter().all(|v| v.is_finite())
            && self.theta.iter().all(|v| v.is_finite());
        if !finite {
            return Err(SaeError::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.n() {
            return Err(SaeError::dim("activation width", self.n(), x.ncols()));
        }
        Ok(())
    }

    /// `W_enc x + b_enc` for every row of `x`.
    pub fn preactivations(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(x.dot(&self.w_enc.t()) + &self.b_enc)
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut pre = self.preactivations(x)?;
        self.gate(&mut pre);
        Ok(pre)
    }

    fn gate(&self, pre: &mut Array2<f64>) {
        for mut row in pre.rows_mut() {
            Zip::from(&mut row)
                .and(&self.theta)
                .for_each(|z, &t| *z = jumprelu(*z, t));
        }
    }

    pub fn decode(&self, codes: ArrayView2<f64>) -> Result<Array2<f64>> {
        if codes.ncols() != self.m() {
            return Err(SaeError::dim("code width", self.m(), codes.ncols()));
        }
        Ok(codes.dot(&self.w_dec.t()) + &self.b_dec)
    }

    /// Encode then decode.
    pub fn reconstruct(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let codes = self.encode(x)?;
        self.decode(codes.view())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Forward> {
        let pre = self.preactivations(x)?;
        let mut codes = pre.clone();
        self.gate(&mut codes);
        let recon = self.decode(codes.view())?;
        Ok(Forward { pre, codes, recon })
    }

    pub fn loss(&self, x: ArrayView2<f64>, lambda_eff: f64, l0_target: f64) -> Result<LossBreakdown> {
        let fwd = self.forward(x)?;
        loss_from_forward(x, &fwd, lambda_eff, l0_target)
    }

    /// Map parameters trained on `x / s` to parameters that act on raw `x`.
    ///
    /// Codes are unchanged (`pre'(x) = pre(x / s)`) and reconstructions are
    /// scaled back up by `s`.
    pub fn rescale_for_raw_inputs(&self, s: f64) -> Result<SaeParams> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(SaeError::Config(format!(
                "normalization factor must be positive, got {s}"
            )));
        }
        Ok(SaeParams {
            w_enc: &self.w_enc / s,
            b_enc: self.b_enc.clone(),
            w_dec: &self.w_dec * s,
            b_dec: &self.b_dec * s,
            theta: self.theta.clone(),
        })
    }
}

/// Loss from an already computed forward pass.
pub fn loss_from_forward(
    x: ArrayView2<f64>,
    fwd: &Forward,
    lambda_eff: f64,
    l0_target: f64,
) -> Result<LossBreakdown> {
    check_loss_args(lambda_eff, l0_target)?;
    let batch = x.nrows() as f64;
    let reconstruction = (&fwd.recon - &x).mapv(|v| v * v).sum() / batch;
    let mean_l0 = active_count(&fwd.codes) / batch;
    let sparsity = sparsity_penalty(mean_l0, lambda_eff, l0_target);
    Ok(LossBreakdown {
        reconstruction,
        sparsity,
        total: reconstruction + sparsity,
        mean_l0,
    })
}

pub(crate) fn check_loss_args(lambda_eff: f64, l0_target: f64) -> Result<()> {
    if !(l0_target > 0.0) {
        return Err(SaeError::Config(format!(
            "l0_target must be positive, got {l0_target}"
        )));
    }
    if !(lambda_eff >= 0.0) {
        return Err(SaeError::Config(format!(
            "sparsity coefficient must be non-negative, got {lambda_eff}"
        )));
    }
    Ok(())
}

/// `lambda * (l0 / target - 1)^2`.
pub fn sparsity_penalty(mean_l0: f64, lambda_eff: f64, l0_target: f64) -> f64 {
    let dev = mean_l0 / l0_target - 1.0;
    lambda_eff * dev * dev
}

fn active_count(codes: &Array2<f64>) -> f64 {
    codes.iter().filter(|&&v| v != 0.0).count() as f64
}

/// Per-row mean of a batch; used for decoder-bias initialization.
pub fn row_mean(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
