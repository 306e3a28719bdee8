//! Hand-derived gradients of the batch loss.
//!
//! Weights and biases get the exact chain rule with the active set held
//! fixed. The thresholds only affect the loss through step functions, so
//! their gradient uses the kernel pseudo-derivatives
//!
//! ```text
//! d/dtheta JumpReLU_theta(z) := -(theta/eps) K((z - theta)/eps)
//! d/dtheta H(z - theta)      := -(1/eps)     K((z - theta)/eps)
//! ```
//!
//! Averaged over a batch this is a kernel density estimate of the gradient of
//! the expected loss: `(1/(N eps)) sum_a [I_i(x_a) - lambda'] K(...)` with
//! `I_i(x) = 2 theta_i d_i . (x - x_hat)`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Result, SaeError};
use crate::kernel::Kernel;
use crate::model::{check_loss_args, loss_from_forward, LossBreakdown, SaeParams};

/// Gradients with the same shapes as [`SaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub g_w_enc: Array2<f64>,
    pub g_b_enc: Array1<f64>,
    pub g_w_dec: Array2<f64>,
    pub g_b_dec: Array1<f64>,
    pub g_theta: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &SaeParams) -> Self {
        Gradients {
            g_w_enc: Array2::zeros(p.w_enc.raw_dim()),
            g_b_enc: Array1::zeros(p.b_enc.len()),
            g_w_dec: Array2::zeros(p.w_dec.raw_dim()),
            g_b_dec: Array1::zeros(p.b_dec.len()),
            g_theta: Array1::zeros(p.theta.len()),
        }
    }

    /// Blocks in a fixed order: w_enc, b_enc, w_dec, b_dec, theta.
    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            self.g_w_enc.as_slice().expect("standard layout"),
            self.g_b_enc.as_slice().expect("standard layout"),
            self.g_w_dec.as_slice().expect("standard layout"),
            self.g_b_dec.as_slice().expect("standard layout"),
            self.g_theta.as_slice().expect("standard layout"),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.g_w_enc.as_slice_mut().expect("standard layout"),
            self.g_b_enc.as_slice_mut().expect("standard layout"),
            self.g_w_dec.as_slice_mut().expect("standard layout"),
            self.g_b_dec.as_slice_mut().expect("standard layout"),
            self.g_theta.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, c: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|v| *v *= c);
        }
    }
}

pub(crate) fn param_blocks_mut(p: &mut SaeParams) -> [&mut [f64]; 5] {
    p.standardize();
    [
        p.w_enc.as_slice_mut().expect("standard layout"),
        p.b_enc.as_slice_mut().expect("standard layout"),
        p.w_dec.as_slice_mut().expect("standard layout"),
        p.b_dec.as_slice_mut().expect("standard layout"),
        p.theta.as_slice_mut().expect("standard layout"),
    ]
}

/// Loss and gradients for one batch.
pub fn backward(
    params: &SaeParams,
    x: ArrayView2<f64>,
    lambda_eff: f64,
    l0_target: f64,
    epsilon: f64,
    kernel: &dyn Kernel,
) -> Result<(LossBreakdown, Gradients)> {
    if !(epsilon > 0.0) {
        return Err(SaeError::Config(format!(
            "kernel bandwidth must be positive, got {epsilon}"
        )));
    }
    check_loss_args(lambda_eff, l0_target)?;
    let fwd = params.forward(x)?;
    let loss = loss_from_forward(x, &fwd, lambda_eff, l0_target)?;
    let batch = x.nrows() as f64;

    // d(loss)/d(x_hat) = (2/B) (x_hat - x)
    let mut resid = fwd.recon.clone();
    resid -= &x;
    resid *= 2.0 / batch;

    let g_b_dec = resid.sum_axis(Axis(0));
    let g_w_dec = resid.t().dot(&fwd.codes);
    // d(loss)/d(f), B x M
    let g_codes = resid.dot(&params.w_dec);

    // Sparsity: lambda (L0/T - 1)^2 -> outer derivative 2 lambda (L0/T - 1) / T.
    let sparsity_slope = 2.0 * lambda_eff * (loss.mean_l0 / l0_target - 1.0) / l0_target;

    let m = params.m();
    let mut g_pre = Array2::<f64>::zeros(g_codes.raw_dim());
    let mut g_theta = Array1::<f64>::zeros(m);
    let inv_eps = 1.0 / epsilon;
    let radius = kernel.radius() * epsilon;

    for ((pre_row, gc_row), mut gp_row) in fwd
        .pre
        .rows()
        .into_iter()
        .zip(g_codes.rows())
        .zip(g_pre.rows_mut())
    {
        for i in 0..m {
            let z = pre_row[i];
            let theta = params.theta[i];
            if z > theta {
                gp_row[i] = gc_row[i];
            }
            let u = z - theta;
            if u.abs() > radius {
                continue;
            }
            let k = kernel.eval(u * inv_eps);
            if k == 0.0 {
                continue;
            }
            // reconstruction path through JumpReLU
            g_theta[i] += gc_row[i] * (-theta * inv_eps * k);
            // L0 path: (1/B) * d/dtheta H
            g_theta[i] += sparsity_slope * (-inv_eps * k) / batch;
        }
    }

    let g_w_enc = g_pre.t().dot(&x);
    let g_b_enc = g_pre.sum_axis(Axis(0));

    let grads = Gradients {
        g_w_enc,
        g_b_enc,
        g_w_dec,
        g_b_dec,
        g_theta,
    };
    if !grads.is_finite() {
        return Err(SaeError::Numeric("non-finite gradient".into()));
    }
    Ok((loss, grads))
}

/// Central finite differences of the batch loss for every parameter entry.
///
/// The loss is piecewise constant in `theta` (and across active-set changes
/// in the encoder), so the `theta` entries here are zero almost everywhere;
/// the threshold gradient only exists in expectation.
pub fn finite_diff_grad(
    params: &SaeParams,
    x: ArrayView2<f64>,
    lambda_eff: f64,
    l0_target: f64,
    step: f64,
) -> Result<Gradients> {
    if !(step > 0.0) {
        return Err(SaeError::Config(format!("step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let mut out = Gradients::zeros_like(params);
    let sizes: Vec<usize> = out.blocks().iter().map(|b| b.len()).collect();
    for (block, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = param_blocks_mut(&mut probe)[block][j];
            param_blocks_mut(&mut probe)[block][j] = orig + step;
            let plus = probe.loss(x, lambda_eff, l0_target)?.total;
            param_blocks_mut(&mut probe)[block][j] = orig - step;
            let minus = probe.loss(x, lambda_eff, l0_target)?.total;
            param_blocks_mut(&mut probe)[block][j] = orig;
            out.blocks_mut()[block][j] = (plus - minus) / (2.0 * step);
        }
    }
    if !out.is_finite() {
        return Err(SaeError::Numeric("finite difference overflowed".into()));
    }
    Ok(out)
}

/// Kernel estimate of `d/dtheta E[lambda * H(z - theta)] = -lambda p(theta)`:
/// `-(lambda / (N eps)) sum_a K((z_a - theta)/eps)`.
pub fn expected_theta_grad_kde(
    preacts: &[f64],
    theta: f64,
    epsilon: f64,
    lambda: f64,
    kernel: &dyn Kernel,
) -> Result<f64> {
    if preacts.is_empty() {
        return Err(SaeError::Input("no preactivation samples".into()));
    }
    if !(epsilon > 0.0) {
        return Err(SaeError::Config(format!(
            "kernel bandwidth must be positive, got {epsilon}"
        )));
    }
    let mass: f64 = preacts
        .iter()
        .map(|&z| kernel.eval((z - theta) / epsilon))
        .sum();
    Ok(-lambda * mass / (preacts.len() as f64 * epsilon))
}

/// Batch-level threshold gradient written directly as the weighted kernel
/// sum `(1/(B eps)) sum_b [I_i(x_b) - lambda'] K(...)`, where `lambda'` is the
/// effective per-unit sparsity price `2 lambda (L0/T - 1)/T`.
///
/// Independent restatement of the threshold part of [`backward`], used by
/// tests and diagnostics.
pub fn theta_grad_weighted_kde(
    params: &SaeParams,
    x: ArrayView2<f64>,
    lambda_eff: f64,
    l0_target: f64,
    epsilon: f64,
    kernel: &dyn Kernel,
) -> Result<Array1<f64>> {
    let fwd = params.forward(x)?;
    let loss = loss_from_forward(x, &fwd, lambda_eff, l0_target)?;
    let price = 2.0 * lambda_eff * (loss.mean_l0 / l0_target - 1.0) / l0_target;
    let batch = x.nrows() as f64;
    let err = &x - &fwd.recon;
    let mut out = Array1::zeros(params.m());
    Zip::indexed(&mut out).for_each(|i, g| {
        let d = params.w_dec.column(i);
        let theta = params.theta[i];
        let mut acc = 0.0;
        for b in 0..x.nrows() {
            let k = kernel.eval((fwd.pre[[b, i]] - theta) / epsilon);
            if k != 0.0 {
                let info = 2.0 * theta * d.dot(&err.row(b));
                acc += (info - price) * k;
            }
        }
        *g = acc / (batch * epsilon);
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Gaussian, Rect};
    use ndarray::{concatenate, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, n: usize, m: usize) -> SaeParams {
        SaeParams {
            w_enc: Array::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0)),
            b_enc: Array1::from_shape_fn(m, |_| rng.random_range(-0.2..0.2)),
            w_dec: Array::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0)),
            b_dec: Array1::from_shape_fn(n, |_| rng.random_range(-0.2..0.2)),
            theta: Array1::from_shape_fn(m, |_| rng.random_range(0.05..0.5)),
        }
    }

    fn random_x(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Array2<f64> {
        Array::from_shape_fn((b, n), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dead_sae_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_params(&mut rng, 4, 6);
        p.theta.fill(1e6);
        let x = random_x(&mut rng, 9, 4);
        let (_, g) = backward(&p, x.view(), 0.0, 3.0, 1e-3, &Rect).unwrap();
        assert!(g.g_w_enc.iter().all(|&v| v == 0.0));
        assert!(g.g_b_enc.iter().all(|&v| v == 0.0));
        assert!(g.g_w_dec.iter().all(|&v| v == 0.0));
        assert!(g.g_theta.iter().all(|&v| v == 0.0));
        let expected = -2.0 * (&x - &p.b_dec).mean_axis(Axis(0)).unwrap();
        for (a, b) in g.g_b_dec.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_bandwidth() {
        let p = SaeParams::zeros(2, 2, 0.1);
        let x = Array2::ones((1, 2));
        assert!(matches!(
            backward(&p, x.view(), 1.0, 1.0, 0.0, &Rect),
            Err(SaeError::Config(_))
        ));
    }

    #[test]
    fn finite_diff_matches_closed_form_for_decoder_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(&mut rng, 3, 5);
        p.theta.fill(1e6);
        let x = random_x(&mut rng, 7, 3);
        let fd = finite_diff_grad(&p, x.view(), 0.0, 1.0, 1e-4).unwrap();
        let expected = -2.0 * (&x - &p.b_dec).mean_axis(Axis(0)).unwrap();
        for (a, b) in fd.g_b_dec.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_diff_error_shrinks_quadratically() {
        // The loss is quadratic in any single weight, so central differences
        // are exact there. Scaling encoder and decoder together gives a
        // quartic path with a nonzero third derivative.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_params(&mut rng, 3, 4);
        p.theta.fill(1e-3);
        p.b_enc.fill(5.0);
        let x = random_x(&mut rng, 6, 3);
        // f(t) = loss(w_dec * (1 + t), w_enc * (1 + t)): quartic in t.
        let f = |t: f64| {
            let mut q = p.clone();
            q.w_dec *= 1.0 + t;
            q.w_enc *= 1.0 + t;
            q.loss(x.view(), 0.0, 1.0).unwrap().total
        };
        // Exact derivative at 0 via a high-order stencil with tiny step.
        let h0 = 1e-3;
        let exact = (-f(2.0 * h0) + 8.0 * f(h0) - 8.0 * f(-h0) + f(-2.0 * h0)) / (12.0 * h0);
        let err = |h: f64| ((f(h) - f(-h)) / (2.0 * h) - exact).abs();
        let e1 = err(0.02);
        let e2 = err(0.01);
        let ratio = e1 / e2;
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn theta_gradient_is_weighted_kde() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = random_params(&mut rng, 4, 3);
        let x = random_x(&mut rng, 64, 4);
        // Put every threshold right at a sampled preactivation so the kernel
        // window is populated.
        let pre = p.preactivations(x.view()).unwrap();
        for i in 0..3 {
            p.theta[i] = pre[[0, i]].abs().max(0.01);
        }
        for kernel in [&Rect as &dyn Kernel, &Gaussian] {
            let eps = 0.05;
            let (_, g) = backward(&p, x.view(), 0.8, 2.0, eps, kernel).unwrap();
            let direct = theta_grad_weighted_kde(&p, x.view(), 0.8, 2.0, eps, kernel).unwrap();
            for (a, b) in g.g_theta.iter().zip(direct.iter()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn theta_rises_when_sparsity_price_dominates() {
        // One unit, one sample, z just above theta. Reconstruction is perfect
        // apart from the unit itself, so I_i is small; with L0 above target
        // the price is positive and the gradient must be negative (descent
        // raises theta).
        let p = SaeParams {
            w_enc: Array2::from_elem((1, 1), 1.0),
            b_enc: Array1::zeros(1),
            w_dec: Array2::from_elem((1, 1), 1.0),
            b_dec: Array1::zeros(1),
            theta: Array1::from_elem(1, 0.5),
        };
        let x = Array2::from_elem((1, 1), 0.5004);
        let eps = 0.001;
        let (loss, g) = backward(&p, x.view(), 1.0, 0.5, eps, &Rect).unwrap();
        assert_eq!(loss.mean_l0, 1.0);
        let price: f64 = 2.0 * 1.0 * (1.0 / 0.5 - 1.0) / 0.5;
        let info = 2.0 * 0.5 * (0.5004 - 0.5004);
        let expected = (info - price) * 1.0 / eps;
        assert!((g.g_theta[0] - expected).abs() < 1e-9);
        assert!(g.g_theta[0] < 0.0);

        // With no sparsity pressure and an under-reconstructing unit, the
        // sign flips: I_i > 0 pushes theta down.
        let mut q = p.clone();
        q.w_dec.fill(0.5);
        let (_, g) = backward(&q, x.view(), 0.0, 0.5, eps, &Rect).unwrap();
        let info = 2.0 * 0.5 * 0.5 * (0.5004 - 0.5 * 0.5004);
        assert!((g.g_theta[0] - info / eps).abs() < 1e-9);
        assert!(g.g_theta[0] > 0.0);
    }

    #[test]
    fn gradient_is_size_weighted_average_over_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_params(&mut rng, 5, 7);
        let a = random_x(&mut rng, 6, 5);
        let b = random_x(&mut rng, 10, 5);
        let ab = concatenate![Axis(0), a, b];
        let eps = 0.05;
        let (_, ga) = backward(&p, a.view(), 0.0, 2.0, eps, &Rect).unwrap();
        let (_, gb) = backward(&p, b.view(), 0.0, 2.0, eps, &Rect).unwrap();
        let (_, gab) = backward(&p, ab.view(), 0.0, 2.0, eps, &Rect).unwrap();
        for k in 0..5 {
            for ((x, y), z) in ga.blocks()[k]
                .iter()
                .zip(gb.blocks()[k])
                .zip(gab.blocks()[k])
            {
                let avg = (6.0 * x + 10.0 * y) / 16.0;
                assert!((avg - z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kde_trivial_cases() {
        let far = [3.0, 4.0, -2.0];
        assert_eq!(expected_theta_grad_kde(&far, 1.0, 0.01, 1.0, &Rect).unwrap(), 0.0);
        let z = [1.0, 1.002, 0.7];
        let one = expected_theta_grad_kde(&z, 1.0, 0.01, 1.0, &Rect).unwrap();
        let two = expected_theta_grad_kde(&z, 1.0, 0.01, 2.0, &Rect).unwrap();
        assert_eq!(two, 2.0 * one);
        assert!((one - (-2.0 / (3.0 * 0.01))).abs() < 1e-9);
    }

    #[test]
    fn kde_converges_to_density_across_seeds() {
        // Average of 20 independent N = 1e5 estimates; Monte-Carlo sigma of the
        // mean is about 1%.
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let z: Vec<f64> = (0..100_000).map(|_| rng.random_range(0.0..2.0)).collect();
            total += expected_theta_grad_kde(&z, 1.0, 0.01, 1.0, &Rect).unwrap();
        }
        let mean = total / 20.0;
        assert!((mean + 0.5).abs() < 0.5 * 0.04, "mean {mean}");
    }
}
