//! Shuffle buffer between an activation source and the training loop.
//!
//! The buffer holds up to `capacity` rows. Batches are drawn without
//! replacement; once the buffer is half empty it is topped back up to
//! capacity from the source and the whole buffer is reshuffled.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::source::ActivationSource;
use super::ActivationBatch;
use crate::error::{Result, SaeError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BufferStats {
    pub refills: u64,
    pub rows_read: u64,
    pub rows_yielded: u64,
    pub epochs_started: u64,
}

pub struct ActivationBuffer {
    source: Box<dyn ActivationSource>,
    capacity: usize,
    dim: usize,
    /// Row-major storage; the next rows to hand out sit at the end.
    data: Vec<f64>,
    rng: ChaCha8Rng,
    max_epochs: u64,
    exhausted: bool,
    stats: BufferStats,
}

impl ActivationBuffer {
    pub fn new(
        source: Box<dyn ActivationSource>,
        capacity: usize,
        max_epochs: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if capacity < 2 {
            return Err(SaeError::Config(format!(
                "buffer capacity must be at least 2 rows, got {capacity}"
            )));
        }
        if max_epochs == 0 {
            return Err(SaeError::Config("max_epochs must be at least 1".into()));
        }
        let dim = source.dim();
        Ok(ActivationBuffer {
            source,
            capacity,
            dim,
            data: Vec::with_capacity(capacity * dim),
            rng,
            max_epochs,
            exhausted: false,
            stats: BufferStats {
                epochs_started: 1,
                ..BufferStats::default()
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn stats(&self) -> BufferStats {
        self.stats
    }

    pub fn source_exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn describe(&self) -> String {
        self.source.describe()
    }

    pub fn needs_refill(&self) -> bool {
        !self.exhausted && self.len() <= self.capacity / 2
    }

    /// Top up to capacity and reshuffle.
    pub fn refill(&mut self) -> Result<()> {
        let mut added = 0usize;
        while self.len() < self.capacity {
            let want = self.capacity - self.len();
            match self.source.next_rows(want)? {
                Some(rows) => {
                    if rows.ncols() != self.dim {
                        return Err(SaeError::dim("source row width", self.dim, rows.ncols()));
                    }
                    added += rows.nrows();
                    self.data.extend(rows.iter().copied());
                }
                None => {
                    if self.stats.epochs_started < self.max_epochs {
                        self.source.rewind()?;
                        self.stats.epochs_started += 1;
                    } else {
                        self.exhausted = true;
                        break;
                    }
                }
            }
        }
        self.stats.refills += 1;
        self.stats.rows_read += added as u64;
        self.shuffle();
        Ok(())
    }

    fn shuffle(&mut self) {
        let rows = self.len();
        let dim = self.dim;
        for i in (1..rows).rev() {
            let j = self.rng.random_range(0..=i);
            if i != j {
                let (lo, hi) = self.data.split_at_mut(i * dim);
                lo[j * dim..(j + 1) * dim].swap_with_slice(&mut hi[..dim]);
            }
        }
    }

    /// Current contents as a matrix (buffer order).
    pub fn snapshot(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.len(), self.dim), self.data.clone())
            .expect("len * dim elements")
    }

    /// Up to `batch_rows` rows, or `None` once the source and the buffer are
    /// both empty. A short batch is returned only at the very end of the
    /// stream.
    pub fn next_batch(&mut self, batch_rows: usize) -> Result<Option<ActivationBatch>> {
        if batch_rows == 0 {
            return Err(SaeError::Config("batch size must be positive".into()));
        }
        if self.needs_refill() {
            self.refill()?;
        }
        let available = self.len();
        if available == 0 {
            return Ok(None);
        }
        let take = batch_rows.min(available);
        let start = (available - take) * self.dim;
        let rows = self.data.split_off(start);
        self.stats.rows_yielded += take as u64;
        let rows = Array2::from_shape_vec((take, self.dim), rows).expect("take * dim elements");
        ActivationBatch::new(rows, self.source.describe()).map(Some)
    }
}
