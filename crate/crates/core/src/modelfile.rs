//! On-disk model formats.
//!
//! `SAEMDL01` (little-endian):
//!
//! ```text
//! magic "SAEMDL01" | u32 n | u32 M
//! w_enc  M*n  f32, row-major
//! b_enc  M    f32
//! w_dec  n*M  f32, row-major
//! b_dec  n    f32
//! theta  M    f32
//! UTF-8 JSON trailer (rest of file): ModelTrailer
//! ```
//!
//! Parameters are stored in raw-activation coordinates; the trailer records
//! the normalization factor used during training.
//!
//! A ground-truth file written by the synthetic generator reuses the layout:
//! `w_dec` is the planted dictionary, `b_dec` the offset, and the encoder
//! fields carry the transposed dictionary with zero bias and unit
//! thresholds. Only the decoder side is meaningful.
//!
//! `SAECKP01` checkpoints hold the full `f64` training state (parameters in
//! normalized coordinates plus Adam moments) so runs can resume exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::shard::to_f32;
use crate::data::synthetic::{SyntheticGroundTruth, SyntheticSpec};
use crate::error::{Result, SaeError};
use crate::grad::Gradients;
use crate::model::SaeParams;
use crate::optim::{AdamState, LogEntry, TrainConfig};

pub const MODEL_MAGIC: &[u8; 8] = b"SAEMDL01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAECKP01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sae,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrailer {
    pub kind: ModelKind,
    /// Factor the training inputs were divided by.
    pub normalization: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticSpec>,
}

impl ModelTrailer {
    pub fn sae(config: TrainConfig, normalization: f64) -> Self {
        ModelTrailer {
            kind: ModelKind::Sae,
            normalization,
            config: Some(config),
            generator: None,
        }
    }
}

fn write_f32s<'a>(w: &mut impl Write, vals: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for &v in vals {
        w.write_f32::<LittleEndian>(to_f32(v)?)
            .map_err(|e| SaeError::io("<model>", e))?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, count: usize, field: &'static str) -> Result<Vec<f64>> {
    let mut buf = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut buf)
        .map_err(|_| SaeError::format(field, "truncated payload"))?;
    Ok(buf.into_iter().map(f64::from).collect())
}

fn read_dims(r: &mut impl Read, magic: &[u8; 8]) -> Result<(usize, usize)> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)
        .map_err(|_| SaeError::format("magic", "file shorter than header"))?;
    if &got != magic {
        return Err(SaeError::format(
            "magic",
            format!(
                "expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&got)
            ),
        ));
    }
    let n = r
        .read_u32::<LittleEndian>()
        .map_err(|_| SaeError::format("n", "truncated header"))? as usize;
    let m = r
        .read_u32::<LittleEndian>()
        .map_err(|_| SaeError::format("M", "truncated header"))? as usize;
    if n == 0 {
        return Err(SaeError::format("n", "must be at least 1"));
    }
    if m == 0 {
        return Err(SaeError::format("M", "must be at least 1"));
    }
    Ok((n, m))
}

pub fn encode_model(params: &SaeParams, trailer: &ModelTrailer) -> Result<Vec<u8>> {
    params.validate()?;
    let (n, m) = (params.n(), params.m());
    let mut out = Vec::with_capacity(16 + 4 * (2 * n * m + 2 * m + n));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    write_f32s(&mut out, params.w_enc.iter())?;
    write_f32s(&mut out, params.b_enc.iter())?;
    write_f32s(&mut out, params.w_dec.iter())?;
    write_f32s(&mut out, params.b_dec.iter())?;
    write_f32s(&mut out, params.theta.iter())?;
    serde_json::to_writer(&mut out, trailer)?;
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(SaeParams, ModelTrailer)> {
    let mut r = bytes;
    let (n, m) = read_dims(&mut r, MODEL_MAGIC)?;
    let w_enc = Array2::from_shape_vec((m, n), read_f32s(&mut r, m * n, "w_enc")?)
        .expect("m * n values");
    let b_enc = Array1::from(read_f32s(&mut r, m, "b_enc")?);
    let w_dec = Array2::from_shape_vec((n, m), read_f32s(&mut r, n * m, "w_dec")?)
        .expect("n * m values");
    let b_dec = Array1::from(read_f32s(&mut r, n, "b_dec")?);
    let theta = Array1::from(read_f32s(&mut r, m, "theta")?);
    if r.is_empty() {
        return Err(SaeError::format("trailer", "missing JSON trailer"));
    }
    let text = std::str::from_utf8(r).map_err(|e| SaeError::format("trailer", e.to_string()))?;
    let trailer: ModelTrailer =
        serde_json::from_str(text).map_err(|e| SaeError::format("trailer", e.to_string()))?;
    let params = SaeParams::new(w_enc, b_enc, w_dec, b_dec, theta)?;
    Ok((params, trailer))
}

pub fn write_model(path: &Path, params: &SaeParams, trailer: &ModelTrailer) -> Result<()> {
    let bytes = encode_model(params, trailer)?;
    std::fs::write(path, bytes).map_err(|e| SaeError::io(path, e))
}

pub fn read_model(path: &Path) -> Result<(SaeParams, ModelTrailer)> {
    let bytes = std::fs::read(path).map_err(|e| SaeError::io(path, e))?;
    decode_model(&bytes)
}

/// Store a planted dictionary in model layout.
pub fn write_ground_truth(path: &Path, gt: &SyntheticGroundTruth) -> Result<()> {
    let params = SaeParams::new(
        gt.dictionary.t().to_owned(),
        Array1::zeros(gt.m_true()),
        gt.dictionary.clone(),
        gt.x0.clone(),
        Array1::ones(gt.m_true()),
    )?;
    let trailer = ModelTrailer {
        kind: ModelKind::GroundTruth,
        normalization: 1.0,
        config: None,
        generator: Some(gt.spec.clone()),
    };
    write_model(path, &params, &trailer)
}

/// Rebuild the generator from a ground-truth file. The dictionary is
/// regenerated from the recorded seed so it carries full precision.
pub fn read_ground_truth(path: &Path) -> Result<SyntheticGroundTruth> {
    let (params, trailer) = read_model(path)?;
    let spec = match (trailer.kind, trailer.generator) {
        (ModelKind::GroundTruth, Some(spec)) => spec,
        _ => {
            return Err(SaeError::format(
                "trailer",
                format!("{} is not a ground-truth file", path.display()),
            ))
        }
    };
    let gt = SyntheticGroundTruth::from_spec(spec)?;
    if gt.n() != params.n() || gt.m_true() != params.m() {
        return Err(SaeError::format(
            "trailer",
            "generator parameters disagree with stored dictionary shape",
        ));
    }
    let drift = (&gt.dictionary - &params.w_dec)
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if drift > 1e-6 {
        return Err(SaeError::format(
            "w_dec",
            format!("stored dictionary differs from regenerated one by {drift:e}"),
        ));
    }
    Ok(gt)
}

/// Full training state for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub params: SaeParams,
    pub adam: AdamState,
    pub step: u64,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub normalization: f64,
    pub log: Vec<LogEntry>,
}

fn write_f64s<'a>(w: &mut impl Write, vals: impl IntoIterator<Item = &'a f64>) -> std::io::Result<()> {
    for &v in vals {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Parameter values block by block in row-major order, whatever the layout.
fn param_values(p: &SaeParams) -> impl Iterator<Item = &f64> {
    p.w_enc
        .iter()
        .chain(p.b_enc.iter())
        .chain(p.w_dec.iter())
        .chain(p.b_dec.iter())
        .chain(p.theta.iter())
}

pub fn write_checkpoint(path: &Path, state: &CheckpointState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| SaeError::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| SaeError::io(&tmp, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(state.params.n() as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(state.params.m() as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(state.step).map_err(io)?;
        w.write_u64::<LittleEndian>(state.adam.step).map_err(io)?;
        write_f64s(&mut w, param_values(&state.params)).map_err(io)?;
        for block in state.adam.m.blocks().into_iter().chain(state.adam.v.blocks()) {
            write_f64s(&mut w, block).map_err(io)?;
        }
        serde_json::to_writer(&mut w, &state.meta)?;
        w.flush().map_err(io)?;
    }
    // Replace atomically so a crash mid-write keeps the previous checkpoint.
    std::fs::rename(&tmp, path).map_err(|e| SaeError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointState> {
    let file = File::open(path).map_err(|e| SaeError::io(path, e))?;
    let mut r = BufReader::new(file);
    let (n, m) = read_dims(&mut r, CHECKPOINT_MAGIC)?;
    let step = r
        .read_u64::<LittleEndian>()
        .map_err(|_| SaeError::format("step", "truncated header"))?;
    let adam_step = r
        .read_u64::<LittleEndian>()
        .map_err(|_| SaeError::format("adam_step", "truncated header"))?;
    let mut params = SaeParams::zeros(n, m, 1.0);
    let mut read_into = |dst: &mut [f64], field: &'static str| -> Result<()> {
        r.read_f64_into::<LittleEndian>(dst)
            .map_err(|_| SaeError::format(field, "truncated payload"))
    };
    {
        let blocks = crate::grad::param_blocks_mut(&mut params);
        for (block, field) in blocks.into_iter().zip(["w_enc", "b_enc", "w_dec", "b_dec", "theta"]) {
            read_into(block, field)?;
        }
    }
    let mut m1 = Gradients::zeros_like(&params);
    let mut m2 = Gradients::zeros_like(&params);
    for block in m1.blocks_mut() {
        read_into(block, "adam_m")?;
    }
    for block in m2.blocks_mut() {
        read_into(block, "adam_v")?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| SaeError::io(path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&rest).map_err(|e| SaeError::format("trailer", e.to_string()))?;
    params.validate()?;
    Ok(CheckpointState {
        params,
        adam: AdamState {
            m: m1,
            v: m2,
            step: adam_step,
        },
        step,
        meta,
    })
}
