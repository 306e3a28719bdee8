//! Matching features across dictionaries by cosine similarity.

mod hungarian;

pub use hungarian::{assignment_cost, hungarian};

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::model::SaeParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `assignment[i]` is the index in `b` matched to feature `i` of `a`.
    pub assignment: Vec<usize>,
    pub similarities: Vec<f64>,
    pub mean_similarity: f64,
}

impl MatchResult {
    /// Fraction of matched pairs with cosine at least `threshold`.
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        if self.similarities.is_empty() {
            return 0.0;
        }
        self.similarities.iter().filter(|&&s| s >= threshold).count() as f64 / self.similarities.len() as f64
    }
}

/// Independent decoder-space and encoder-space matches of one SAE into another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub decoder: MatchResult,
    pub encoder: MatchResult,
    pub consistent: Vec<bool>,
    pub consistent_count: usize,
}

impl ConsistencyReport {
    pub fn consistency_fraction(&self) -> f64 {
        self.consistent_count as f64 / self.consistent.len().max(1) as f64
    }

    /// Columns `feature_index,decoder_sim,encoder_sim,consistent`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "feature_index,decoder_sim,encoder_sim,consistent")?;
        for i in 0..self.consistent.len() {
            writeln!(
                out,
                "{},{},{},{}",
                i, self.decoder.similarities[i], self.encoder.similarities[i], self.consistent[i]
            )?;
        }
        Ok(())
    }
}

/// Columns scaled to unit norm; `label` names the matrix in errors.
fn unit_columns(m: ArrayView2<f64>, label: &str) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(SaeError::Input(format!("{label} column {j} has norm {norm}")));
        }
        col /= norm;
    }
    Ok(out)
}

/// `M_a x M_b` cosine similarities between columns.
pub fn cosine_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != b.nrows() {
        return Err(SaeError::dim("dictionary dimension", a.nrows(), b.nrows()));
    }
    let ua = unit_columns(a, "first dictionary")?;
    let ub = unit_columns(b, "second dictionary")?;
    Ok(ua.t().dot(&ub).mapv(|c| c.clamp(-1.0, 1.0)))
}

/// Optimal one-to-one matching of the columns of `a` (`n x M_a`) into the
/// columns of `b` (`n x M_b`), `M_a <= M_b`, under cost `1 - cosine`.
pub fn match_dictionaries(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<MatchResult> {
    if a.ncols() > b.ncols() {
        return Err(SaeError::Input(format!(
            "first dictionary has {} features, more than the second's {}; swap the arguments",
            a.ncols(),
            b.ncols()
        )));
    }
    let sims = cosine_matrix(a, b)?;
    let cost = sims.mapv(|s| 1.0 - s);
    let assignment = hungarian(cost.view())?;
    let similarities: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| sims[[i, j]]).collect();
    let mean_similarity = if similarities.is_empty() {
        0.0
    } else {
        similarities.iter().sum::<f64>() / similarities.len() as f64
    };
    Ok(MatchResult {
        assignment,
        similarities,
        mean_similarity,
    })
}

/// Match decoder columns and encoder rows separately and count features
/// whose two matches agree.
pub fn encoder_decoder_consistency(a: &SaeParams, b: &SaeParams) -> Result<ConsistencyReport> {
    if a.n() != b.n() {
        return Err(SaeError::dim("SAE input width", a.n(), b.n()));
    }
    let decoder = match_dictionaries(a.w_dec.view(), b.w_dec.view())?;
    let encoder = match_dictionaries(a.w_enc.t(), b.w_enc.t())?;
    let consistent: Vec<bool> = decoder
        .assignment
        .iter()
        .zip(&encoder.assignment)
        .map(|(d, e)| d == e)
        .collect();
    let consistent_count = consistent.iter().filter(|&&c| c).count();
    Ok(ConsistencyReport {
        decoder,
        encoder,
        consistent,
        consistent_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning [-1, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// For each column of `a`, the best cosine against any column of `b`.
pub fn max_cosines(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Vec<f64>> {
    let sims = cosine_matrix(a, b)?;
    Ok(sims
        .rows()
        .into_iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

pub fn max_cosine_histogram(a: ArrayView2<f64>, b: ArrayView2<f64>, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(SaeError::Config("histogram needs at least one bin".into()));
    }
    let maxima = max_cosines(a, b)?;
    let width = 2.0 / bins as f64;
    let edges = (0..=bins).map(|i| -1.0 + i as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for m in maxima {
        let idx = (((m + 1.0) / width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn permutation(m: usize, seed: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..m).collect();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    #[test]
    fn permuted_copy_is_matched_back() {
        let a = gaussian(8, 12, 1);
        let perm = permutation(12, 2);
        // b[:, k] = a[:, perm[k]]
        let b = a.select(Axis(1), &perm);
        let res = match_dictionaries(a.view(), b.view()).unwrap();
        assert!((res.mean_similarity - 1.0).abs() < 1e-12);
        for (i, &j) in res.assignment.iter().enumerate() {
            assert_eq!(perm[j], i);
        }
    }

    #[test]
    fn positive_rescaling_does_not_change_matching() {
        let a = gaussian(6, 5, 3);
        let b = gaussian(6, 9, 4);
        let base = match_dictionaries(a.view(), b.view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a2 = a.clone();
        for mut c in a2.columns_mut() {
            c *= rng.random_range(0.1..10.0);
        }
        let mut b2 = b.clone();
        for mut c in b2.columns_mut() {
            c *= rng.random_range(0.1..10.0);
        }
        let scaled = match_dictionaries(a2.view(), b2.view()).unwrap();
        assert_eq!(scaled.assignment, base.assignment);
        for (x, y) in scaled.similarities.iter().zip(&base.similarities) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_column_is_named() {
        let a = gaussian(4, 3, 6);
        let mut b = gaussian(4, 3, 7);
        b.column_mut(2).fill(0.0);
        let err = match_dictionaries(a.view(), b.view()).unwrap_err();
        assert!(err.to_string().contains("column 2"), "{err}");
        assert!(match_dictionaries(gaussian(4, 5, 1).view(), a.view()).is_err());
    }

    #[test]
    fn self_consistency_is_total() {
        let mut p = SaeParams::zeros(6, 10, 0.1);
        p.w_dec = gaussian(6, 10, 8);
        p.w_enc = gaussian(10, 6, 9);
        let rep = encoder_decoder_consistency(&p, &p).unwrap();
        assert_eq!(rep.consistent_count, 10);
        assert!(rep.decoder.similarities.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(rep.encoder.similarities.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn joint_permutation_stays_consistent() {
        let mut a = SaeParams::zeros(6, 10, 0.1);
        a.w_dec = gaussian(6, 10, 10);
        a.w_enc = gaussian(10, 6, 11);
        let perm = permutation(10, 12);
        let mut b = a.clone();
        b.w_dec = a.w_dec.select(Axis(1), &perm);
        b.w_enc = a.w_enc.select(Axis(0), &perm);
        let rep = encoder_decoder_consistency(&a, &b).unwrap();
        assert_eq!(rep.consistent_count, 10);
        for (i, &j) in rep.decoder.assignment.iter().enumerate() {
            assert_eq!(perm[j], i);
        }
        // Swapping roles inverts the assignment.
        let back = encoder_decoder_consistency(&b, &a).unwrap();
        for (i, &j) in rep.decoder.assignment.iter().enumerate() {
            assert_eq!(back.decoder.assignment[j], i);
        }
    }

    #[test]
    fn independent_saes_are_rarely_consistent() {
        let mut a = SaeParams::zeros(16, 32, 0.1);
        a.w_dec = gaussian(16, 32, 13);
        a.w_enc = gaussian(32, 16, 14);
        let mut b = a.clone();
        b.w_dec = gaussian(16, 32, 15);
        b.w_enc = gaussian(32, 16, 16);
        let rep = encoder_decoder_consistency(&a, &b).unwrap();
        assert!(rep.consistency_fraction() < 0.5);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("feature_index,decoder_sim,encoder_sim,consistent\n"));
        assert_eq!(text.lines().count(), 33);
    }

    #[test]
    fn histogram_cases() {
        let a = gaussian(8, 5, 17);
        let mut b = gaussian(8, 9, 18);
        for j in 0..5 {
            b.column_mut(j + 2).assign(&a.column(j));
        }
        let h = max_cosine_histogram(a.view(), b.view(), 20).unwrap();
        assert_eq!(h.counts[19], 5);
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(h.edges.len(), 21);

        let eye = Array2::<f64>::eye(8);
        let lo = eye.slice(ndarray::s![.., ..4]);
        let hi = eye.slice(ndarray::s![.., 4..]);
        let maxima = max_cosines(lo, hi).unwrap();
        assert!(maxima.iter().all(|m| m.abs() < 1e-6));
        assert!(max_cosine_histogram(a.view(), b.view(), 0).is_err());
    }
}
