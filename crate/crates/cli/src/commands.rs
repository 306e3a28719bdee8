use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use log::info;
use ndarray::{concatenate, Array2, Axis};
use serde_json::json;

use jumpsae::data::shard::{list_shards, read_meta, write_meta, write_shard, ShardMeta, ShardReader, SHARD_EXTENSION};
use jumpsae::data::source::{ShardDirSource, SyntheticSource};
use jumpsae::data::synthetic::{synth_generate, SyntheticGroundTruth, SyntheticSpec};
use jumpsae::data::ActivationSource;
use jumpsae::featmatch::{encoder_decoder_consistency, max_cosine_histogram};
use jumpsae::metrics::{evaluate, DownstreamEvaluator, EvalReport, SyntheticEvaluator};
use jumpsae::modelfile::{read_checkpoint, read_ground_truth, read_model, write_ground_truth, write_model, ModelTrailer};
use jumpsae::optim::train::{CHECKPOINT_FILE, CHECKPOINT_MODEL_FILE};
use jumpsae::optim::{self, TrainOptions};
use jumpsae::rng::{substream, Stream};
use jumpsae::{darkmatter as dm, SaeParams, TrainConfig};

use crate::config::{resolve, ConfigOverrides};
use crate::manifest::RunManifest;

pub const MODEL_FILE: &str = "model.saemdl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.saemdl";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Logit scale of the synthetic readout behind loss recovered.
const READOUT_SCALE: f64 = 4.0;

/// Where activations come from: a shard directory or a planted generator.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory of SAEACT01 shards.
    #[arg(long, conflicts_with = "ground_truth")]
    pub shards: Option<PathBuf>,
    /// Ground-truth file from `gen-synthetic`; rows are generated on the fly.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub m_true: usize,
    /// Expected number of active features per row.
    #[arg(long, default_value_t = 5.0)]
    pub k: f64,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    /// Rows per shard file; everything goes in one shard by default.
    #[arg(long)]
    pub shard_rows: Option<usize>,
    #[arg(long)]
    pub coeff_low: Option<f64>,
    #[arg(long)]
    pub coeff_high: Option<f64>,
    #[arg(long)]
    pub offset_norm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Continue from a SAECKP01 checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write a checkpoint into the output directory every eval interval.
    #[arg(long)]
    pub checkpoint: bool,
    /// Read activations on a background thread.
    #[arg(long)]
    pub prefetch: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10_000)]
    pub rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classes of the synthetic readout used for loss recovered.
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DarkmatterArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10_000)]
    pub rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Model matched into; needs at least as many features.
    #[arg(long)]
    pub against: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub l0_targets: Vec<f64>,
    /// Rows each trained model is evaluated on.
    #[arg(long, default_value_t = 10_000)]
    pub rows: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// A shard file or a directory of shards.
    pub path: PathBuf,
    /// Also write the headers and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One line to stdout; a closed pipe is not an error.
fn emit(line: impl std::fmt::Display) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn gen_synthetic(a: GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.n, a.m_true, a.k, a.seed);
    if let Some(v) = a.coeff_low {
        spec.coeff_low = v;
    }
    if let Some(v) = a.coeff_high {
        spec.coeff_high = v;
    }
    if let Some(v) = a.offset_norm {
        spec.offset_norm = v;
    }
    let gt = SyntheticGroundTruth::from_spec(spec.clone())?;
    ensure!(a.count > 0, "--count must be positive");
    let per_shard = a.shard_rows.unwrap_or(a.count);
    ensure!(per_shard > 0, "--shard-rows must be positive");
    create_dir(&a.out)?;

    let (batch, _) = synth_generate(&gt, a.count, a.seed)?;
    let rows = batch.rows();
    let mut manifest = RunManifest::new("gen-synthetic");
    manifest.seed = Some(a.seed);
    for (i, start) in (0..a.count).step_by(per_shard).enumerate() {
        let end = (start + per_shard).min(a.count);
        let path = a.out.join(format!("shard_{i:05}.{SHARD_EXTENSION}"));
        write_shard(&path, rows.slice(ndarray::s![start..end, ..]))?;
        let meta = ShardMeta {
            generator: Some(json!({
                "spec": spec,
                "sample_seed": a.seed,
                "first_row": start,
                "rows": end - start,
            })),
            ..ShardMeta::default()
        };
        write_meta(&path, &meta)?;
        manifest.artifact(jumpsae::data::shard::meta_path(&path));
        manifest.artifact(path);
    }
    let gt_path = a.out.join(GROUND_TRUTH_FILE);
    write_ground_truth(&gt_path, &gt)?;
    manifest.artifact(&gt_path);
    manifest.parameters = json!({ "spec": spec, "count": a.count, "shard_rows": per_shard });
    manifest.write(&a.out)?;
    info!("wrote {} rows of width {} to {}", a.count, a.n, a.out.display());
    Ok(())
}

/// Training source: shards, or fresh generator rows up to the token budget.
fn training_source(data: &DataArgs, cfg: &TrainConfig, manifest: &mut RunManifest) -> Result<Box<dyn ActivationSource>> {
    match (&data.shards, &data.ground_truth) {
        (Some(dir), None) => {
            manifest.input(dir);
            Ok(Box::new(ShardDirSource::open(dir.clone())?))
        }
        (None, Some(gt_path)) => {
            manifest.input(gt_path);
            let gt = read_ground_truth(gt_path)?;
            let rows = usize::try_from(cfg.total_tokens).context("total_tokens too large")?;
            Ok(Box::new(SyntheticSource::new(gt, cfg.seed, rows.max(1))))
        }
        _ => bail!("give exactly one of --shards or --ground-truth"),
    }
}

/// Evaluation rows plus the generator when the data is synthetic.
fn evaluation_rows(
    data: &DataArgs,
    rows: usize,
    seed: u64,
    manifest: &mut RunManifest,
) -> Result<(Array2<f64>, Option<SyntheticGroundTruth>)> {
    ensure!(rows > 0, "--rows must be positive");
    match (&data.shards, &data.ground_truth) {
        (Some(dir), None) => {
            manifest.input(dir);
            let mut src = ShardDirSource::open(dir.clone())?;
            let mut parts = Vec::new();
            let mut have = 0;
            while have < rows {
                match src.next_rows(rows - have)? {
                    Some(chunk) => {
                        have += chunk.nrows();
                        parts.push(chunk);
                    }
                    None => break,
                }
            }
            ensure!(have > 0, "no rows in {}", dir.display());
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            Ok((concatenate(Axis(0), &views)?, None))
        }
        (None, Some(gt_path)) => {
            manifest.input(gt_path);
            let gt = read_ground_truth(gt_path)?;
            let (x, _) = gt.sample(&mut substream(seed, Stream::Evaluator, 1), rows);
            Ok((x, Some(gt)))
        }
        _ => bail!("give exactly one of --shards or --ground-truth"),
    }
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<(SaeParams, ModelTrailer)> {
    manifest.input(path);
    read_model(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(a.config.as_deref(), &a.overrides, a.seed)?;
    let mut manifest = RunManifest::new("train");
    if let Some(c) = &a.config {
        manifest.input(c);
    }
    let source = training_source(&a.data, &cfg, &mut manifest)?;
    if cfg.input_dim == 0 {
        cfg.input_dim = source.dim();
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let resume = match &a.resume {
        Some(p) => {
            manifest.input(p);
            Some(read_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?)
        }
        None => None,
    };
    let options = TrainOptions {
        checkpoint_dir: a.checkpoint.then(|| a.out.clone()),
        resume,
        prefetch: a.prefetch,
    };
    let outcome = optim::train(&cfg, source, options)?;

    let model_path = a.out.join(MODEL_FILE);
    let raw = outcome.raw_params()?;
    write_model(&model_path, &raw, &ModelTrailer::sae(cfg.clone(), outcome.normalization))?;
    let log_path = a.out.join(LOG_FILE);
    let mut w = create(&log_path)?;
    for entry in &outcome.log.entries {
        writeln!(w, "{}", serde_json::to_string(entry)?)?;
    }
    w.flush()?;

    manifest.artifact(&model_path);
    manifest.artifact(&log_path);
    if a.checkpoint {
        for name in [CHECKPOINT_FILE, CHECKPOINT_MODEL_FILE] {
            let p = a.out.join(name);
            if p.exists() {
                manifest.artifact(p);
            }
        }
    }
    manifest.seed = Some(cfg.seed);
    manifest.parameters = json!({
        "normalization": outcome.normalization,
        "steps_completed": outcome.log.steps_completed,
        "truncated": outcome.log.truncated,
        "buffer": {
            "refills": outcome.buffer.refills,
            "rows_read": outcome.buffer.rows_read,
            "epochs_started": outcome.buffer.epochs_started,
        },
    });
    manifest.config = Some(cfg);
    manifest.write(&a.out)?;
    info!("wrote {}", model_path.display());
    Ok(())
}

fn report_for(
    params: &SaeParams,
    x: &Array2<f64>,
    gt: Option<&SyntheticGroundTruth>,
    classes: usize,
    seed: u64,
) -> Result<EvalReport> {
    ensure!(
        x.ncols() == params.n(),
        "model expects width {}, data has width {}",
        params.n(),
        x.ncols()
    );
    let evaluator = match gt {
        Some(gt) => Some(SyntheticEvaluator::new(gt, x.nrows(), classes, READOUT_SCALE, seed)?),
        None => None,
    };
    Ok(evaluate(
        params,
        x.view(),
        evaluator.as_ref().map(|e| e as &dyn DownstreamEvaluator),
    )?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::new("eval");
    let (params, trailer) = load_model(&a.model, &mut manifest)?;
    let (x, gt) = evaluation_rows(&a.data, a.rows, a.seed, &mut manifest)?;
    let report = report_for(&params, &x, gt.as_ref(), a.classes, a.seed)?;
    create_dir(&a.out)?;
    let path = a.out.join("eval.jsonl");
    let line = serde_json::to_string(&report)?;
    fs::write(&path, format!("{line}\n")).with_context(|| format!("writing {}", path.display()))?;
    emit(&line)?;
    manifest.artifact(&path);
    manifest.seed = Some(a.seed);
    manifest.config = trailer.config;
    manifest.parameters = json!({ "rows": x.nrows(), "classes": a.classes });
    manifest.write(&a.out)?;
    Ok(())
}

pub fn darkmatter(a: DarkmatterArgs) -> Result<()> {
    let mut manifest = RunManifest::new("darkmatter");
    let (params, trailer) = load_model(&a.model, &mut manifest)?;
    let (x, _) = evaluation_rows(&a.data, a.rows, a.seed, &mut manifest)?;
    ensure!(
        x.ncols() == params.n(),
        "model expects width {}, data has width {}",
        params.n(),
        x.ncols()
    );
    let x_hat = params.reconstruct(x.view())?;
    let report = dm::analyze(x.view(), x_hat.view(), a.seed)?;
    create_dir(&a.out)?;
    let path = a.out.join("darkmatter.json");
    write_json(&path, &report)?;
    emit(serde_json::to_string(&report)?)?;
    manifest.artifact(&path);
    manifest.seed = Some(a.seed);
    manifest.config = trailer.config;
    manifest.parameters = json!({ "rows": x.nrows() });
    manifest.write(&a.out)?;
    Ok(())
}

pub fn matching(a: MatchArgs) -> Result<()> {
    let mut manifest = RunManifest::new("match");
    let (pa, _) = load_model(&a.model, &mut manifest)?;
    let (pb, _) = load_model(&a.against, &mut manifest)?;
    let report = encoder_decoder_consistency(&pa, &pb)?;
    let hist = max_cosine_histogram(pa.w_dec.view(), pb.w_dec.view(), a.bins)?;
    create_dir(&a.out)?;

    let json_path = a.out.join("match.json");
    write_json(&json_path, &report)?;
    let csv_path = a.out.join("match.csv");
    let mut w = create(&csv_path)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let hist_path = a.out.join("max_cosine_histogram.csv");
    let mut w = create(&hist_path)?;
    hist.write_csv(&mut w)?;
    w.flush()?;

    emit(json!({
        "decoder_mean_similarity": report.decoder.mean_similarity,
        "encoder_mean_similarity": report.encoder.mean_similarity,
        "consistent_count": report.consistent_count,
        "features": report.consistent.len(),
    }))?;
    for p in [&json_path, &csv_path, &hist_path] {
        manifest.artifact(p);
    }
    manifest.parameters = json!({ "bins": a.bins });
    manifest.write(&a.out)?;
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let base = resolve(a.config.as_deref(), &a.overrides, a.seed)?;
    let mut manifest = RunManifest::new("sweep");
    if let Some(c) = &a.config {
        manifest.input(c);
    }
    create_dir(&a.out)?;
    let (x, gt) = evaluation_rows(&a.data, a.rows, base.seed, &mut manifest)?;

    let csv_path = a.out.join("sweep.csv");
    let mut csv = create(&csv_path)?;
    writeln!(csv, "l0_target,width,mean_l0,fve,cosine_mean,gamma,loss_recovered,steps")?;
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for &target in &a.l0_targets {
        let mut cfg = base.clone();
        cfg.l0_target = target;
        let source = training_source(&a.data, &cfg, &mut RunManifest::new("sweep"))?;
        if cfg.input_dim == 0 {
            cfg.input_dim = source.dim();
        }
        cfg.validate()?;
        info!("sweep: training with l0_target {target}");
        let outcome = optim::train(&cfg, source, TrainOptions::default())?;
        let raw = outcome.raw_params()?;
        let run_dir = a.out.join(format!("l0_{target}"));
        create_dir(&run_dir)?;
        let model_path = run_dir.join(MODEL_FILE);
        write_model(&model_path, &raw, &ModelTrailer::sae(cfg.clone(), outcome.normalization))?;
        manifest.artifact(&model_path);

        let r = report_for(&raw, &x, gt.as_ref(), a.classes, base.seed)?;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            target,
            r.width,
            r.mean_l0,
            r.fve,
            r.cosine_mean,
            fmt_opt(r.gamma),
            fmt_opt(r.loss_recovered),
            outcome.log.steps_completed
        )?;
    }
    csv.flush()?;
    manifest.artifact(&csv_path);
    manifest.seed = Some(base.seed);
    manifest.config = Some(base);
    manifest.parameters = json!({ "l0_targets": a.l0_targets, "rows": x.nrows() });
    manifest.write(&a.out)?;
    Ok(())
}

pub fn inspect_shard(a: InspectArgs) -> Result<()> {
    let paths = if a.path.is_dir() {
        list_shards(&a.path)?
    } else {
        vec![a.path.clone()]
    };
    ensure!(!paths.is_empty(), "no .{SHARD_EXTENSION} files in {}", a.path.display());
    let mut out = Vec::new();
    let mut width = None;
    for p in &paths {
        let reader = ShardReader::open(p).with_context(|| format!("invalid shard {}", p.display()))?;
        let h = *reader.header();
        if let Some(w) = width {
            ensure!(
                w == h.d_model,
                "{} has d_model {} but earlier shards have {w}",
                p.display(),
                h.d_model
            );
        }
        width = Some(h.d_model);
        let entry = json!({
            "path": p,
            "magic": String::from_utf8_lossy(&h.magic),
            "d_model": h.d_model,
            "dtype_code": h.dtype_code,
            "n_rows": h.n_rows,
            "meta": read_meta(p)?,
        });
        emit(&entry)?;
        out.push(entry);
    }
    if let Some(dir) = a.out {
        create_dir(&dir)?;
        let path = dir.join("inspect.json");
        write_json(&path, &out)?;
        let mut manifest = RunManifest::new("inspect-shard");
        manifest.input(&a.path);
        manifest.artifact(&path);
        manifest.write(&dir)?;
    }
    Ok(())
}
