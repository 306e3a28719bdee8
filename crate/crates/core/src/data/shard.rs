//! `SAEACT01` activation shards.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SAEACT01"
//! 8       4     d_model    u32 LE
//! 12      4     dtype_code u32 LE (0 = f32)
//! 16      8     n_rows     u64 LE
//! 24      ...   n_rows * d_model f32 LE, row-major
//! ```
//!
//! An optional `<shard>.meta.json` sidecar describes where the rows came from.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ActivationBatch;
use crate::error::{Result, SaeError};

pub const SHARD_MAGIC: &[u8; 8] = b"SAEACT01";
pub const HEADER_LEN: u64 = 24;
pub const DTYPE_F32: u32 = 0;
pub const SHARD_EXTENSION: &str = "saeact";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub magic: [u8; 8],
    pub d_model: u32,
    pub dtype_code: u32,
    pub n_rows: u64,
}

impl ShardHeader {
    pub fn new(d_model: usize, n_rows: usize) -> Self {
        ShardHeader {
            magic: *SHARD_MAGIC,
            d_model: d_model as u32,
            dtype_code: DTYPE_F32,
            n_rows: n_rows as u64,
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        self.n_rows * self.d_model as u64 * 4
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| SaeError::format("magic", "file shorter than header"))?;
        if &magic != SHARD_MAGIC {
            return Err(SaeError::format(
                "magic",
                format!("expected {:?}, found {:?}", SHARD_MAGIC, String::from_utf8_lossy(&magic)),
            ));
        }
        let d_model = r
            .read_u32::<LittleEndian>()
            .map_err(|_| SaeError::format("d_model", "truncated header"))?;
        let dtype_code = r
            .read_u32::<LittleEndian>()
            .map_err(|_| SaeError::format("dtype_code", "truncated header"))?;
        let n_rows = r
            .read_u64::<LittleEndian>()
            .map_err(|_| SaeError::format("n_rows", "truncated header"))?;
        if d_model == 0 {
            return Err(SaeError::format("d_model", "must be at least 1"));
        }
        if dtype_code != DTYPE_F32 {
            return Err(SaeError::format(
                "dtype_code",
                format!("unsupported dtype {dtype_code}, only 0 (f32) is defined"),
            ));
        }
        Ok(ShardHeader {
            magic,
            d_model,
            dtype_code,
            n_rows,
        })
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.magic)?;
        w.write_u32::<LittleEndian>(self.d_model)?;
        w.write_u32::<LittleEndian>(self.dtype_code)?;
        w.write_u64::<LittleEndian>(self.n_rows)
    }
}

/// Provenance sidecar stored next to a shard as `<shard>.meta.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShardMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_skip: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

pub fn meta_path(shard: &Path) -> PathBuf {
    let mut name = shard.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_meta(shard: &Path, meta: &ShardMeta) -> Result<()> {
    let path = meta_path(shard);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&path, text).map_err(|e| SaeError::io(path, e))
}

pub fn read_meta(shard: &Path) -> Result<Option<ShardMeta>> {
    let path = meta_path(shard);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| SaeError::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub(crate) fn to_f32(v: f64) -> Result<f32> {
    let f = v as f32;
    if !f.is_finite() {
        return Err(SaeError::Numeric(format!("value {v} is not representable as f32")));
    }
    Ok(f)
}

pub fn write_shard(path: &Path, rows: ArrayView2<f64>) -> Result<ShardHeader> {
    if rows.nrows() == 0 {
        return Err(SaeError::Degenerate("refusing to write a shard with no rows".into()));
    }
    if rows.ncols() == 0 || rows.ncols() > u32::MAX as usize {
        return Err(SaeError::format("d_model", format!("invalid width {}", rows.ncols())));
    }
    let header = ShardHeader::new(rows.ncols(), rows.nrows());
    let file = File::create(path).map_err(|e| SaeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| SaeError::io(path, e);
    header.write_to(&mut w).map_err(io)?;
    for row in rows.rows() {
        for &v in row {
            w.write_f32::<LittleEndian>(to_f32(v)?).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(header)
}

/// Sequential reader over one shard; validates the header and the file length
/// on open.
pub struct ShardReader {
    path: PathBuf,
    header: ShardHeader,
    reader: BufReader<File>,
    remaining: u64,
}

impl ShardReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SaeError::io(path, e))?;
        let len = file.metadata().map_err(|e| SaeError::io(path, e))?.len();
        let mut reader = BufReader::new(file);
        let header = ShardHeader::read_from(&mut reader)?;
        let expected = HEADER_LEN + header.payload_bytes();
        if len != expected {
            return Err(SaeError::format(
                "n_rows",
                format!(
                    "header declares {} rows of width {} ({expected} bytes) but file has {len} bytes",
                    header.n_rows, header.d_model
                ),
            ));
        }
        Ok(ShardReader {
            path: path.to_path_buf(),
            header,
            reader,
            remaining: header.n_rows,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    /// Up to `max` further rows, or `None` at end of shard.
    pub fn read_rows(&mut self, max: usize) -> Result<Option<Array2<f64>>> {
        if self.remaining == 0 || max == 0 {
            return Ok(None);
        }
        let take = (max as u64).min(self.remaining) as usize;
        let width = self.header.d_model as usize;
        let mut buf = vec![0f32; take * width];
        self.reader
            .read_f32_into::<LittleEndian>(&mut buf)
            .map_err(|e| SaeError::io(&self.path, e))?;
        self.remaining -= take as u64;
        let data: Vec<f64> = buf.into_iter().map(f64::from).collect();
        let rows = Array2::from_shape_vec((take, width), data)
            .expect("buffer sized to take * width");
        Ok(Some(rows))
    }
}

pub fn read_shard_header(path: &Path) -> Result<ShardHeader> {
    Ok(*ShardReader::open(path)?.header())
}

pub fn read_shard(path: &Path) -> Result<ActivationBatch> {
    let mut reader = ShardReader::open(path)?;
    let n_rows = reader.header().n_rows as usize;
    let rows = reader
        .read_rows(n_rows)?
        .ok_or_else(|| SaeError::format("n_rows", "shard contains no rows"))?;
    ActivationBatch::new(rows, path.display().to_string())
}

/// Shard files in a directory, sorted by name.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| SaeError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| SaeError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(SHARD_EXTENSION) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(SaeError::Input(format!(
            "no .{SHARD_EXTENSION} shards in {}",
            dir.display()
        )));
    }
    Ok(out)
}
