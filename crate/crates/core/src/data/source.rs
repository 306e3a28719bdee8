//! Activation sources feeding the shuffle buffer.
//!
//! A source hands out rows in a fixed order and can be rewound for another
//! epoch. Sources are constructed by name from a JSON description (see
//! [`registry`]) so the CLI and config files can pick one at runtime.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, SyncSender, TryRecvError};
use std::thread::JoinHandle;

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::Value;

use super::shard::{list_shards, ShardReader};
use super::synthetic::{SyntheticGroundTruth, SyntheticSpec};
use crate::error::{Result, SaeError};
use crate::rng::{stream, Stream};

pub trait ActivationSource: Send {
    /// Row width.
    fn dim(&self) -> usize;

    fn describe(&self) -> String;

    /// Up to `max` further rows, `None` once the current epoch is exhausted.
    fn next_rows(&mut self, max: usize) -> Result<Option<Array2<f64>>>;

    /// Restart from the first row.
    fn rewind(&mut self) -> Result<()>;
}

/// Rows held in memory; mostly for tests and small evaluations.
pub struct InMemorySource {
    rows: Array2<f64>,
    cursor: usize,
    tag: String,
}

impl InMemorySource {
    pub fn new(rows: Array2<f64>, tag: impl Into<String>) -> Self {
        InMemorySource {
            rows,
            cursor: 0,
            tag: tag.into(),
        }
    }
}

impl ActivationSource for InMemorySource {
    fn dim(&self) -> usize {
        self.rows.ncols()
    }

    fn describe(&self) -> String {
        format!("memory:{}", self.tag)
    }

    fn next_rows(&mut self, max: usize) -> Result<Option<Array2<f64>>> {
        if self.cursor >= self.rows.nrows() || max == 0 {
            return Ok(None);
        }
        let end = (self.cursor + max).min(self.rows.nrows());
        let out = self.rows.slice(s![self.cursor..end, ..]).to_owned();
        self.cursor = end;
        Ok(Some(out))
    }

    fn rewind(&mut self) -> Result<()> {
        self.cursor = 0;
        Ok(())
    }
}

/// Every `.saeact` shard of a directory, read sequentially in name order.
pub struct ShardDirSource {
    dir: PathBuf,
    shards: Vec<PathBuf>,
    dim: usize,
    next_shard: usize,
    current: Option<ShardReader>,
}

impl ShardDirSource {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let shards = list_shards(&dir)?;
        let dim = ShardReader::open(&shards[0])?.header().d_model as usize;
        for path in &shards[1..] {
            let d = ShardReader::open(path)?.header().d_model as usize;
            if d != dim {
                return Err(SaeError::format(
                    "d_model",
                    format!("{} has width {d}, expected {dim}", path.display()),
                ));
            }
        }
        Ok(ShardDirSource {
            dir,
            shards,
            dim,
            next_shard: 0,
            current: None,
        })
    }

    pub fn total_rows(&self) -> Result<u64> {
        self.shards
            .iter()
            .map(|p| ShardReader::open(p).map(|r| r.header().n_rows))
            .sum()
    }
}

impl ActivationSource for ShardDirSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn describe(&self) -> String {
        format!("shards:{}", self.dir.display())
    }

    fn next_rows(&mut self, max: usize) -> Result<Option<Array2<f64>>> {
        loop {
            if let Some(reader) = self.current.as_mut() {
                if let Some(rows) = reader.read_rows(max)? {
                    return Ok(Some(rows));
                }
                self.current = None;
            }
            if self.next_shard >= self.shards.len() {
                return Ok(None);
            }
            self.current = Some(ShardReader::open(&self.shards[self.next_shard])?);
            self.next_shard += 1;
        }
    }

    fn rewind(&mut self) -> Result<()> {
        self.next_shard = 0;
        self.current = None;
        Ok(())
    }
}

/// Fresh synthetic rows, up to `limit` per epoch. Rewinding restarts the
/// random stream, so each epoch replays the same rows.
pub struct SyntheticSource {
    gt: SyntheticGroundTruth,
    seed: u64,
    limit: usize,
    produced: usize,
    rng: ChaCha8Rng,
}

impl SyntheticSource {
    pub fn new(gt: SyntheticGroundTruth, seed: u64, limit: usize) -> Self {
        SyntheticSource {
            rng: stream(seed, Stream::Coefficients),
            gt,
            seed,
            limit,
            produced: 0,
        }
    }

    pub fn ground_truth(&self) -> &SyntheticGroundTruth {
        &self.gt
    }
}

impl ActivationSource for SyntheticSource {
    fn dim(&self) -> usize {
        self.gt.n()
    }

    fn describe(&self) -> String {
        format!("synthetic:{}:{}", self.gt.spec.seed, self.seed)
    }

    fn next_rows(&mut self, max: usize) -> Result<Option<Array2<f64>>> {
        let take = max.min(self.limit - self.produced);
        if take == 0 {
            return Ok(None);
        }
        self.produced += take;
        Ok(Some(self.gt.sample(&mut self.rng, take).0))
    }

    fn rewind(&mut self) -> Result<()> {
        self.rng = stream(self.seed, Stream::Coefficients);
        self.produced = 0;
        Ok(())
    }
}

enum Chunk {
    Rows(u64, Array2<f64>),
    End(u64),
    Failed(u64, SaeError),
}

enum Control {
    Rewind,
}

/// Runs another source on a producer thread, keeping a bounded queue of
/// chunks ready for the consumer.
///
/// Each chunk carries the epoch it was produced in; after a rewind the
/// consumer drops chunks from the previous epoch.
pub struct PrefetchSource {
    dim: usize,
    description: String,
    chunk_rows: usize,
    epoch: u64,
    pending: Option<Array2<f64>>,
    data: Option<Receiver<Chunk>>,
    control: Option<SyncSender<Control>>,
    worker: Option<JoinHandle<()>>,
}

impl PrefetchSource {
    pub fn spawn(mut inner: Box<dyn ActivationSource>, chunk_rows: usize, depth: usize) -> Self {
        let dim = inner.dim();
        let description = format!("prefetch({})", inner.describe());
        let chunk_rows = chunk_rows.max(1);
        let (data_tx, data_rx) = mpsc::sync_channel::<Chunk>(depth.max(1));
        let (ctl_tx, ctl_rx) = mpsc::sync_channel::<Control>(4);
        let worker = std::thread::spawn(move || {
            let mut epoch = 0u64;
            loop {
                match ctl_rx.try_recv() {
                    Ok(Control::Rewind) => {
                        if let Err(e) = inner.rewind() {
                            let _ = data_tx.send(Chunk::Failed(epoch + 1, e));
                            return;
                        }
                        epoch += 1;
                        continue;
                    }
                    Err(TryRecvError::Disconnected) => return,
                    Err(TryRecvError::Empty) => {}
                }
                let msg = match inner.next_rows(chunk_rows) {
                    Ok(Some(rows)) => Chunk::Rows(epoch, rows),
                    Ok(None) => Chunk::End(epoch),
                    Err(e) => Chunk::Failed(epoch, e),
                };
                let finished = !matches!(msg, Chunk::Rows(..));
                if data_tx.send(msg).is_err() {
                    return;
                }
                if finished {
                    // Idle until the consumer rewinds or goes away.
                    match ctl_rx.recv() {
                        Ok(Control::Rewind) => {
                            if let Err(e) = inner.rewind() {
                                let _ = data_tx.send(Chunk::Failed(epoch + 1, e));
                                return;
                            }
                            epoch += 1;
                        }
                        Err(_) => return,
                    }
                }
            }
        });
        PrefetchSource {
            dim,
            description,
            chunk_rows,
            epoch: 0,
            pending: None,
            data: Some(data_rx),
            control: Some(ctl_tx),
            worker: Some(worker),
        }
    }

    fn recv_current(&mut self) -> Result<Option<Array2<f64>>> {
        let rx = self.data.as_ref().expect("receiver present until drop");
        loop {
            match rx.recv() {
                Ok(Chunk::Rows(e, rows)) if e == self.epoch => return Ok(Some(rows)),
                Ok(Chunk::End(e)) if e == self.epoch => return Ok(None),
                Ok(Chunk::Failed(e, err)) if e == self.epoch => return Err(err),
                Ok(_) => continue,
                Err(_) => {
                    return Err(SaeError::Input(
                        "prefetch worker stopped unexpectedly".into(),
                    ))
                }
            }
        }
    }
}

impl ActivationSource for PrefetchSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn describe(&self) -> String {
        self.description.clone()
    }

    fn next_rows(&mut self, max: usize) -> Result<Option<Array2<f64>>> {
        if max == 0 {
            return Ok(None);
        }
        let rows = match self.pending.take() {
            Some(rows) => rows,
            None => match self.recv_current()? {
                Some(rows) => rows,
                None => return Ok(None),
            },
        };
        if rows.nrows() <= max {
            return Ok(Some(rows));
        }
        self.pending = Some(rows.slice(s![max.., ..]).to_owned());
        Ok(Some(rows.slice(s![..max, ..]).to_owned()))
    }

    fn rewind(&mut self) -> Result<()> {
        self.pending = None;
        self.epoch += 1;
        self.control
            .as_ref()
            .expect("control present until drop")
            .send(Control::Rewind)
            .map_err(|_| SaeError::Input("prefetch worker stopped unexpectedly".into()))
    }
}

impl Drop for PrefetchSource {
    fn drop(&mut self) {
        self.data.take();
        self.control.take();
        if let Some(handle) = self.worker.take() {
            let _ = handle.join();
        }
    }
}

impl PrefetchSource {
    pub fn chunk_rows(&self) -> usize {
        self.chunk_rows
    }
}

type Constructor = fn(&Value) -> Result<Box<dyn ActivationSource>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ShardsArgs {
    dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticArgs {
    spec: SyntheticSpec,
    seed: u64,
    rows: usize,
}

fn build_shards(args: &Value) -> Result<Box<dyn ActivationSource>> {
    let args: ShardsArgs = serde_json::from_value(args.clone())?;
    Ok(Box::new(ShardDirSource::open(args.dir)?))
}

fn build_synthetic(args: &Value) -> Result<Box<dyn ActivationSource>> {
    let args: SyntheticArgs = serde_json::from_value(args.clone())?;
    let gt = SyntheticGroundTruth::from_spec(args.spec)?;
    Ok(Box::new(SyntheticSource::new(gt, args.seed, args.rows)))
}

/// Name -> constructor table of built-in sources.
///
/// * `shards`: `{"dir": <path>}`
/// * `synthetic`: `{"spec": <SyntheticSpec>, "seed": <u64>, "rows": <count>}`
pub fn registry() -> BTreeMap<&'static str, Constructor> {
    let mut map: BTreeMap<&'static str, Constructor> = BTreeMap::new();
    map.insert("shards", build_shards);
    map.insert("synthetic", build_synthetic);
    map
}

pub fn build(kind: &str, args: &Value) -> Result<Box<dyn ActivationSource>> {
    let ctor = registry().get(kind).copied().ok_or_else(|| {
        SaeError::Config(format!(
            "unknown activation source `{kind}` (known: {})",
            registry().keys().copied().collect::<Vec<_>>().join(", ")
        ))
    })?;
    ctor(args)
}

/// Drain a source's current epoch into one matrix.
pub fn collect_all(source: &mut dyn ActivationSource) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    while let Some(chunk) = source.next_rows(8192)? {
        rows += chunk.nrows();
        data.extend(chunk.iter().copied());
    }
    Ok(Array2::from_shape_vec((rows, source.dim()), data).expect("rows * dim elements"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shard::write_shard;
    use crate::data::synthetic::{synth_generate, synth_ground_truth};
    use ndarray::Array;

    fn tagged(rows: usize, dim: usize) -> Array2<f64> {
        Array::from_shape_fn((rows, dim), |(r, c)| if c == 0 { r as f64 } else { 0.5 })
    }

    #[test]
    fn in_memory_chunks_and_rewinds() {
        let mut src = InMemorySource::new(tagged(5, 2), "t");
        assert_eq!(src.next_rows(3).unwrap().unwrap().nrows(), 3);
        assert_eq!(src.next_rows(3).unwrap().unwrap().nrows(), 2);
        assert!(src.next_rows(3).unwrap().is_none());
        src.rewind().unwrap();
        assert_eq!(src.next_rows(10).unwrap().unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn shard_dir_reads_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let all = tagged(10, 3);
        write_shard(&dir.path().join("b.saeact"), all.slice(s![6.., ..])).unwrap();
        write_shard(&dir.path().join("a.saeact"), all.slice(s![..6, ..])).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let mut src = ShardDirSource::open(dir.path()).unwrap();
        assert_eq!(src.dim(), 3);
        assert_eq!(src.total_rows().unwrap(), 10);
        let got = collect_all(&mut src).unwrap();
        assert_eq!(got, all);
        src.rewind().unwrap();
        assert_eq!(collect_all(&mut src).unwrap(), all);
    }

    #[test]
    fn shard_dir_rejects_mixed_widths() {
        let dir = tempfile::tempdir().unwrap();
        write_shard(&dir.path().join("a.saeact"), tagged(2, 3).view()).unwrap();
        write_shard(&dir.path().join("b.saeact"), tagged(2, 4).view()).unwrap();
        assert!(matches!(
            ShardDirSource::open(dir.path()),
            Err(SaeError::Format { field: "d_model", .. })
        ));
    }

    #[test]
    fn synthetic_source_matches_one_shot_generation() {
        let gt = synth_ground_truth(6, 10, 2.0, 1).unwrap();
        let (batch, _) = synth_generate(&gt, 25, 42).unwrap();
        let mut src = SyntheticSource::new(gt, 42, 25);
        let mut got = collect_all(&mut src).unwrap();
        assert_eq!(got, batch.rows());
        src.rewind().unwrap();
        got = collect_all(&mut src).unwrap();
        assert_eq!(got, batch.rows());
    }

    #[test]
    fn prefetch_is_transparent() {
        let rows = tagged(103, 4);
        let mut direct = InMemorySource::new(rows.clone(), "d");
        let mut pre = PrefetchSource::spawn(Box::new(InMemorySource::new(rows.clone(), "p")), 7, 2);
        assert_eq!(pre.dim(), 4);
        let a = collect_all(&mut direct).unwrap();
        let b = collect_all(&mut pre).unwrap();
        assert_eq!(a, b);
        // Rewind after exhaustion and mid-epoch.
        pre.rewind().unwrap();
        let first = pre.next_rows(5).unwrap().unwrap();
        assert_eq!(first[[0, 0]], 0.0);
        pre.rewind().unwrap();
        assert_eq!(collect_all(&mut pre).unwrap(), rows);
    }

    #[test]
    fn registry_builds_by_name() {
        let dir = tempfile::tempdir().unwrap();
        write_shard(&dir.path().join("a.saeact"), tagged(4, 2).view()).unwrap();
        let src = build("shards", &serde_json::json!({ "dir": dir.path() })).unwrap();
        assert_eq!(src.dim(), 2);

        let spec = SyntheticSpec::new(5, 8, 1.0, 3);
        let mut src = build(
            "synthetic",
            &serde_json::json!({ "spec": spec, "seed": 1, "rows": 9 }),
        )
        .unwrap();
        assert_eq!(collect_all(src.as_mut()).unwrap().nrows(), 9);

        assert!(build("parquet", &Value::Null).is_err());
        assert!(build("shards", &serde_json::json!({ "dir": "x", "extra": 1 })).is_err());
    }
}
