//! Activation data: the in-memory batch type, shard files, input
//! normalization, the synthetic ground-truth generator and the streaming
//! shuffle buffer that feeds training.

pub mod buffer;
pub mod shard;
pub mod source;
pub mod synthetic;

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, SaeError};

pub use buffer::ActivationBuffer;
pub use shard::{read_shard, write_shard, ShardHeader, ShardMeta};
pub use source::ActivationSource;
pub use synthetic::SyntheticGroundTruth;

/// A block of activation vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    rows: Array2<f64>,
    pub source_tag: String,
    pub normalized: bool,
}

impl ActivationBatch {
    pub fn new(rows: Array2<f64>, source_tag: impl Into<String>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(SaeError::Degenerate("batch has no rows".into()));
        }
        if rows.ncols() == 0 {
            return Err(SaeError::Degenerate("batch has zero width".into()));
        }
        if let Some(pos) = rows.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / rows.ncols(), pos % rows.ncols());
            return Err(SaeError::Numeric(format!(
                "non-finite activation at row {r}, column {c}"
            )));
        }
        Ok(ActivationBatch {
            rows,
            source_tag: source_tag.into(),
            normalized: false,
        })
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Divide every row by `s`, marking the batch as normalized.
    pub fn normalized_by(&self, s: f64) -> ActivationBatch {
        ActivationBatch {
            rows: &self.rows / s,
            source_tag: self.source_tag.clone(),
            normalized: true,
        }
    }
}

/// `sqrt(mean_b ||x_b||^2)`: dividing by it gives unit mean squared norm.
pub fn normalization_factor(x: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(SaeError::Degenerate("empty batch".into()));
    }
    let msn = x.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64;
    if !(msn > 0.0) {
        return Err(SaeError::Degenerate(
            "all-zero batch has no normalization factor".into(),
        ));
    }
    Ok(msn.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_rejects_empty_and_nan() {
        assert!(ActivationBatch::new(Array2::zeros((0, 3)), "t").is_err());
        assert!(ActivationBatch::new(array![[1.0, f64::NAN]], "t").is_err());
        assert!(ActivationBatch::new(array![[1.0, 2.0]], "t").is_ok());
    }

    #[test]
    fn normalization_cases() {
        let x = array![[2.0, 0.0], [0.0, -2.0], [1.2, 1.6]];
        assert!((normalization_factor(x.view()).unwrap() - 2.0).abs() < 1e-12);

        let unit = array![[1.0, 0.0], [0.6, 0.8]];
        assert!((normalization_factor(unit.view()).unwrap() - 1.0).abs() < 1e-6);

        assert!(matches!(
            normalization_factor(Array2::<f64>::zeros((4, 3)).view()),
            Err(SaeError::Degenerate(_))
        ));
    }

    #[test]
    fn normalized_batch_has_unit_mean_squared_norm_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array::from_shape_fn((50, 7), |_| rng.random_range(-3.0..5.0));
        let batch = ActivationBatch::new(x, "rand").unwrap();
        let s = normalization_factor(batch.rows()).unwrap();
        let normed = batch.normalized_by(s);
        assert!(normed.normalized);
        let msn = normed.rows().iter().map(|v| v * v).sum::<f64>() / 50.0;
        assert!((msn - 1.0).abs() < 1e-6);
        let s2 = normalization_factor(normed.rows()).unwrap();
        assert!((s2 - 1.0).abs() < 1e-6);
    }
}
