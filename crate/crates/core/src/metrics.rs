//! Unsupervised SAE metrics: sparsity, fraction of variance explained,
//! reconstruction cosine, relative reconstruction bias and loss recovered.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticGroundTruth;
use crate::error::{Result, SaeError};
use crate::model::SaeParams;
use crate::rng::{stream, Stream};

/// One point on a sparsity/fidelity Pareto curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub width: usize,
    pub mean_l0: f64,
    pub fve: f64,
    pub cosine_mean: f64,
    pub gamma: Option<f64>,
    pub loss_recovered: Option<f64>,
    pub sample_count: usize,
}

fn check_same_shape(x: &ArrayView2<f64>, x_hat: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != x_hat.ncols() {
        return Err(SaeError::dim("reconstruction width", x.ncols(), x_hat.ncols()));
    }
    if x.nrows() != x_hat.nrows() {
        return Err(SaeError::dim("reconstruction rows", x.nrows(), x_hat.nrows()));
    }
    Ok(())
}

/// Mean count of non-zero entries per row.
pub fn mean_l0(codes: ArrayView2<f64>) -> f64 {
    if codes.nrows() == 0 {
        return 0.0;
    }
    codes.iter().filter(|&&v| v != 0.0).count() as f64 / codes.nrows() as f64
}

/// Sum over dimensions of the (1/B) variance about the per-dimension mean.
fn total_variance(x: ArrayView2<f64>) -> f64 {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let b = x.nrows() as f64;
    x.rows()
        .into_iter()
        .map(|row| (&row - &mean).mapv(|v| v * v).sum())
        .sum::<f64>()
        / b
}

/// `1 - Var(x - x_hat) / Var(x)`, variances summed across dimensions.
pub fn fraction_variance_explained(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(&x, &x_hat)?;
    if x.nrows() < 2 {
        return Err(SaeError::Degenerate("variance needs at least two rows".into()));
    }
    let var_x = total_variance(x);
    if !(var_x > 0.0) {
        return Err(SaeError::Degenerate("inputs have zero variance".into()));
    }
    let resid = &x - &x_hat;
    Ok(1.0 - total_variance(resid.view()) / var_x)
}

/// Mean per-row cosine similarity between inputs and reconstructions.
pub fn cosine_mean(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(&x, &x_hat)?;
    if x.nrows() == 0 {
        return Err(SaeError::Degenerate("empty batch".into()));
    }
    let mut acc = 0.0;
    for (i, (a, b)) in x.rows().into_iter().zip(x_hat.rows()).enumerate() {
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if na == 0.0 {
            return Err(SaeError::Degenerate(format!("input row {i} has zero norm")));
        }
        if nb == 0.0 {
            return Err(SaeError::Degenerate(format!("reconstruction row {i} has zero norm")));
        }
        acc += (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok(acc / x.nrows() as f64)
}

/// The expectations the bias metric is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasMoments {
    /// `E ||x_hat||^2`
    pub a: f64,
    /// `E x_hat . x`
    pub b: f64,
    /// `E ||x||^2`
    pub c: f64,
    /// `E ||x_hat - x||^2`
    pub d: f64,
}

impl BiasMoments {
    pub fn from_batch(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<Self> {
        check_same_shape(&x, &x_hat)?;
        if x.nrows() == 0 {
            return Err(SaeError::Degenerate("empty batch".into()));
        }
        let rows = x.nrows() as f64;
        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        for (xr, hr) in x.rows().into_iter().zip(x_hat.rows()) {
            a += hr.dot(&hr);
            b += hr.dot(&xr);
            c += xr.dot(&xr);
            let diff = &hr - &xr;
            d += diff.dot(&diff);
        }
        Ok(BiasMoments {
            a: a / rows,
            b: b / rows,
            c: c / rows,
            d: d / rows,
        })
    }

    /// `A / B`.
    pub fn gamma_direct(&self) -> f64 {
        self.a / self.b
    }

    /// `2A / (A + C - D)`, using `2 a.b = |a|^2 + |b|^2 - |a-b|^2`.
    pub fn gamma_from_mse(&self) -> f64 {
        2.0 * self.a / (self.a + self.c - self.d)
    }
}

/// Optimal `gamma` such that `x_hat / gamma` best matches `x` in L2.
/// Both closed forms are evaluated and must agree.
pub fn reconstruction_bias_gamma(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<f64> {
    let mom = BiasMoments::from_batch(x, x_hat)?;
    let scale = mom.a.max(mom.c);
    if !(mom.b.abs() >= 1e-12 * scale) || scale == 0.0 {
        return Err(SaeError::UndefinedBias(format!(
            "E[x_hat . x] = {:e} is numerically zero",
            mom.b
        )));
    }
    let g1 = mom.gamma_direct();
    let g2 = mom.gamma_from_mse();
    if (g1 - g2).abs() > 1e-6 * g1.abs().max(1.0) {
        return Err(SaeError::Numeric(format!(
            "closed forms of gamma disagree: {g1} vs {g2}"
        )));
    }
    Ok(g1)
}

/// `1 - (ce_sae - ce_id) / (ce_zero - ce_id)`.
pub fn loss_recovered(ce_sae: f64, ce_id: f64, ce_zero: f64) -> Result<f64> {
    let span = ce_zero - ce_id;
    if span == 0.0 || !span.is_finite() {
        return Err(SaeError::UndefinedMetric(format!(
            "zero-ablation loss {ce_zero} equals clean loss {ce_id}"
        )));
    }
    Ok(1.0 - (ce_sae - ce_id) / span)
}

/// Maps a batch of activations to the batch that is fed downstream.
pub type Substitution<'a> = dyn Fn(ArrayView2<f64>) -> Result<Array2<f64>> + 'a;

/// A downstream task whose loss can be measured with activations replaced.
pub trait DownstreamEvaluator {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Average loss when held-out activations go through `substitution`.
    fn loss(&self, substitution: &Substitution<'_>) -> Result<f64>;
}

pub fn downstream_ce(evaluator: &dyn DownstreamEvaluator, substitution: &Substitution<'_>) -> Result<f64> {
    evaluator.loss(substitution)
}

/// Softmax readout over planted features, scored against its own clean
/// predictions.
///
/// Ground-truth features are dealt to classes by a seeded shuffle and each
/// class logit sums its features' directions, projected orthogonal to the
/// offset so the zero vector scores uniform logits. The label of a held-out
/// row is the argmax of the clean logits, so substitutions are penalized for
/// changing what the readout would have said.
pub struct SyntheticEvaluator {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    readout: Array2<f64>,
}

impl SyntheticEvaluator {
    pub fn new(gt: &SyntheticGroundTruth, count: usize, classes: usize, scale: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(SaeError::Config("evaluator needs at least two classes".into()));
        }
        if count == 0 {
            return Err(SaeError::Config("evaluator needs at least one row".into()));
        }
        let mut rng = stream(seed, Stream::Evaluator);
        let mut assignment: Vec<usize> = (0..gt.m_true()).map(|j| j % classes).collect();
        assignment.shuffle(&mut rng);
        let (inputs, _) = gt.sample(&mut rng, count);

        let x0 = &gt.x0;
        let x0_sq = x0.dot(x0);
        let mut readout = Array2::zeros((classes, gt.n()));
        for (j, &class) in assignment.iter().enumerate() {
            let mut row = readout.row_mut(class);
            row += &gt.dictionary.column(j);
        }
        if x0_sq > 0.0 {
            for mut row in readout.rows_mut() {
                let proj = row.dot(x0) / x0_sq;
                row.scaled_add(-proj, x0);
            }
        }
        readout *= scale;

        let labels = inputs
            .dot(&readout.t())
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        Ok(SyntheticEvaluator {
            inputs,
            labels,
            readout,
        })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    fn cross_entropy(&self, acts: ArrayView2<f64>) -> f64 {
        let logits = acts.dot(&self.readout.t());
        let mut total = 0.0;
        for (row, &label) in logits.rows().into_iter().zip(&self.labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        total / self.labels.len() as f64
    }
}

impl DownstreamEvaluator for SyntheticEvaluator {
    fn name(&self) -> &str {
        "synthetic-readout"
    }

    fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    fn loss(&self, substitution: &Substitution<'_>) -> Result<f64> {
        let replaced = substitution(self.inputs.view())?;
        if replaced.dim() != self.inputs.dim() {
            return Err(SaeError::dim("substituted activations", self.inputs.ncols(), replaced.ncols()));
        }
        Ok(self.cross_entropy(replaced.view()))
    }
}

/// Clean, zero-ablated and SAE-substituted losses plus the resulting score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecoveredParts {
    pub ce_id: f64,
    pub ce_zero: f64,
    pub ce_sae: f64,
    pub loss_recovered: f64,
}

pub fn loss_recovered_for(params: &SaeParams, evaluator: &dyn DownstreamEvaluator) -> Result<LossRecoveredParts> {
    if evaluator.dim() != params.n() {
        return Err(SaeError::dim("evaluator width", params.n(), evaluator.dim()));
    }
    let ce_id = downstream_ce(evaluator, &|x| Ok(x.to_owned()))?;
    let ce_zero = downstream_ce(evaluator, &|x| Ok(Array2::zeros(x.raw_dim())))?;
    let ce_sae = downstream_ce(evaluator, &|x| params.reconstruct(x))?;
    Ok(LossRecoveredParts {
        ce_id,
        ce_zero,
        ce_sae,
        loss_recovered: loss_recovered(ce_sae, ce_id, ce_zero)?,
    })
}

/// All metrics for `params` (raw coordinates) on `x`.
pub fn evaluate(
    params: &SaeParams,
    x: ArrayView2<f64>,
    evaluator: Option<&dyn DownstreamEvaluator>,
) -> Result<EvalReport> {
    let codes = params.encode(x)?;
    let x_hat = params.decode(codes.view())?;
    let gamma = match reconstruction_bias_gamma(x, x_hat.view()) {
        Ok(g) => Some(g),
        Err(SaeError::UndefinedBias(_)) => None,
        Err(e) => return Err(e),
    };
    let loss_recovered = match evaluator {
        Some(ev) => Some(loss_recovered_for(params, ev)?.loss_recovered),
        None => None,
    };
    Ok(EvalReport {
        width: params.m(),
        mean_l0: mean_l0(codes.view()),
        fve: fraction_variance_explained(x, x_hat.view())?,
        cosine_mean: cosine_mean(x, x_hat.view())?,
        gamma,
        loss_recovered,
        sample_count: x.nrows(),
    })
}

/// Per-feature firing rate over a batch, useful for spotting dead units.
pub fn firing_rates(codes: ArrayView2<f64>) -> Array1<f64> {
    let b = codes.nrows().max(1) as f64;
    codes.map_axis(Axis(0), |col| col.iter().filter(|v| **v != 0.0).count() as f64 / b)
}
