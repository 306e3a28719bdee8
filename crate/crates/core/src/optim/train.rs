use std::path::PathBuf;

use log::{info, warn};
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{adam_step, clip_gradients, lr_schedule, sparsity_schedule, AdamState, TrainConfig};
use crate::data::buffer::{ActivationBuffer, BufferStats};
use crate::data::source::{ActivationSource, PrefetchSource};
use crate::data::normalization_factor;
use crate::error::{Result, SaeError};
use crate::grad::backward;
use crate::kernel;
use crate::model::{row_mean, SaeParams};
use crate::modelfile::{write_checkpoint, write_model, CheckpointMeta, CheckpointState, ModelTrailer};
use crate::rng::{stream, Stream};

pub type Checkpoint = CheckpointState;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CHECKPOINT_MODEL_FILE: &str = "checkpoint.saemdl";

/// One line of the training log (JSON-lines on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub tokens: u64,
    pub lr: f64,
    pub lambda_eff: f64,
    pub reconstruction: f64,
    pub sparsity: f64,
    pub total: f64,
    pub mean_l0: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub steps_completed: u64,
    pub truncated: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Write a resumable checkpoint here every `eval_interval` steps.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Read the source on a background thread.
    pub prefetch: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters in normalized-input coordinates.
    pub params: SaeParams,
    /// Factor the inputs were divided by during training.
    pub normalization: f64,
    pub log: TrainLog,
    pub buffer: BufferStats,
}

impl TrainOutcome {
    /// Parameters that act on raw (unnormalized) activations.
    pub fn raw_params(&self) -> Result<SaeParams> {
        self.params.rescale_for_raw_inputs(self.normalization)
    }
}

/// Tied initialization: random unit-norm decoder columns, encoder equal to
/// the decoder transpose, decoder bias at the data mean.
pub fn initial_params(config: &TrainConfig, normalized_sample: &Array2<f64>) -> SaeParams {
    let (n, m) = (config.input_dim, config.dict_size);
    let mut rng = stream(config.seed, Stream::Init);
    let mut w_dec = Array2::<f64>::zeros((n, m));
    for mut col in w_dec.columns_mut() {
        col.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        let norm = col.dot(&col).sqrt();
        col /= norm;
    }
    SaeParams {
        w_enc: w_dec.t().as_standard_layout().into_owned(),
        b_enc: Array1::zeros(m),
        w_dec,
        b_dec: row_mean(normalized_sample.view()),
        theta: Array1::from_elem(m, config.theta_init),
    }
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut a = a.clone();
    a.total_tokens = b.total_tokens;
    &a == b
}

pub fn train(
    config: &TrainConfig,
    source: Box<dyn ActivationSource>,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if source.dim() != config.input_dim {
        return Err(SaeError::dim("source width vs input_dim", config.input_dim, source.dim()));
    }
    let kernel = kernel::by_name(&config.kernel)?;
    let source: Box<dyn ActivationSource> = if options.prefetch {
        Box::new(PrefetchSource::spawn(source, config.batch_tokens, 4))
    } else {
        source
    };
    let mut buffer = ActivationBuffer::new(
        source,
        config.buffer_capacity,
        config.max_epochs,
        stream(config.seed, Stream::Buffer),
    )?;
    buffer.refill()?;
    if buffer.is_empty() {
        return Err(SaeError::Degenerate("activation source is empty".into()));
    }

    let (mut params, mut adam, start_step, s, mut log) = match options.resume {
        Some(ck) => {
            if !same_run(&ck.meta.config, config) {
                return Err(SaeError::Config(
                    "checkpoint was written with a different configuration".into(),
                ));
            }
            // Off-grid entries mark where the earlier run stopped; the
            // continued run logs those steps only if they land on the grid.
            let interval = config.eval_interval;
            let log = TrainLog {
                entries: ck.meta.log.into_iter().filter(|e| e.step % interval == 0).collect(),
                steps_completed: ck.step,
                ..TrainLog::default()
            };
            (ck.params, ck.adam, ck.step, ck.meta.normalization, log)
        }
        None => {
            let first = buffer.snapshot();
            let s = normalization_factor(first.view())?;
            let params = initial_params(config, &(first / s));
            let adam = AdamState::new(&params);
            (params, adam, 0, s, TrainLog::default())
        }
    };

    // Re-draw the batches a resumed run has already consumed so the data
    // stream lines up exactly.
    for _ in 0..start_step {
        if buffer.next_batch(config.batch_tokens)?.is_none() {
            return Err(SaeError::Input(
                "source ran out while replaying to the checkpoint step".into(),
            ));
        }
    }

    let total_steps = config.total_steps();
    let mut last_checkpoint: Option<u64> = None;
    let mut tokens = start_step * config.batch_tokens as u64;
    info!(
        "training {}x{} SAE for {} steps from {}",
        config.input_dim,
        config.dict_size,
        total_steps,
        buffer.describe()
    );

    for step in start_step..total_steps {
        let batch = match buffer.next_batch(config.batch_tokens)? {
            Some(b) => b,
            None => {
                let msg = format!(
                    "activation source exhausted after {step} of {total_steps} steps"
                );
                warn!("{msg}");
                log.warnings.push(msg);
                log.truncated = true;
                break;
            }
        };
        let x = batch.normalized_by(s);
        let lr = lr_schedule(step, config);
        let lambda_eff = sparsity_schedule(step, config);
        let result = backward(
            &params,
            x.rows(),
            lambda_eff,
            config.l0_target,
            config.epsilon_bandwidth,
            kernel.as_ref(),
        )
        .and_then(|(loss, mut grads)| {
            let norm = clip_gradients(&mut grads, config.clip_max_norm);
            adam_step(&mut params, &grads, &mut adam, lr, config)?;
            Ok((loss, norm))
        });
        let (loss, grad_norm) = result.map_err(|e| match e {
            SaeError::Numeric(msg) => SaeError::Numeric(format!(
                "{msg} at step {step}; last checkpoint: {}",
                last_checkpoint.map_or("none".into(), |s| format!("step {s}"))
            )),
            other => other,
        })?;
        tokens += x.len() as u64;
        log.steps_completed = step + 1;

        if step % config.eval_interval == 0 || step + 1 == total_steps {
            log.entries.push(LogEntry {
                step,
                tokens,
                lr,
                lambda_eff,
                reconstruction: loss.reconstruction,
                sparsity: loss.sparsity,
                total: loss.total,
                mean_l0: loss.mean_l0,
                grad_norm,
            });
        }
        if let Some(dir) = options.checkpoint_dir.as_ref() {
            if (step + 1) % config.eval_interval == 0 {
                let state = CheckpointState {
                    params: params.clone(),
                    adam: adam.clone(),
                    step: step + 1,
                    meta: CheckpointMeta {
                        config: config.clone(),
                        normalization: s,
                        log: log.entries.clone(),
                    },
                };
                write_checkpoint(&dir.join(CHECKPOINT_FILE), &state)?;
                write_model(
                    &dir.join(CHECKPOINT_MODEL_FILE),
                    &params.rescale_for_raw_inputs(s)?,
                    &ModelTrailer::sae(config.clone(), s),
                )?;
                last_checkpoint = Some(step + 1);
            }
        }
    }

    Ok(TrainOutcome {
        params,
        normalization: s,
        log,
        buffer: buffer.stats(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::source::{InMemorySource, SyntheticSource};
    use crate::data::synthetic::synth_ground_truth;

    fn small_config() -> TrainConfig {
        TrainConfig {
            dict_size: 16,
            input_dim: 8,
            l0_target: 3.0,
            lr: 2e-3,
            lr_warmup_steps: 5,
            sparsity_warmup_steps: 20,
            epsilon_bandwidth: 0.05,
            total_tokens: 64 * 40,
            batch_tokens: 64,
            buffer_capacity: 512,
            eval_interval: 5,
            seed: 3,
            theta_init: 0.05,
            ..TrainConfig::default()
        }
    }

    fn source(rows: usize) -> Box<dyn ActivationSource> {
        let gt = synth_ground_truth(8, 12, 2.0, 1).unwrap();
        Box::new(SyntheticSource::new(gt, 2, rows))
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut c = small_config();
        c.total_tokens = 0;
        let out = train(&c, source(1000), TrainOptions::default()).unwrap();
        assert_eq!(out.log.steps_completed, 0);
        assert!(out.log.entries.is_empty());
        let mut buf = ActivationBuffer::new(source(1000), c.buffer_capacity, 1, stream(c.seed, Stream::Buffer)).unwrap();
        buf.refill().unwrap();
        let first = buf.snapshot();
        let s = normalization_factor(first.view()).unwrap();
        assert_eq!(out.normalization, s);
        assert_eq!(out.params, initial_params(&c, &(first / s)));
    }

    #[test]
    fn initialization_is_tied_and_unit_norm() {
        let c = small_config();
        let sample = Array2::from_elem((4, 8), 0.5);
        let p = initial_params(&c, &sample);
        for col in p.w_dec.columns() {
            assert!((col.dot(&col) - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.w_enc, p.w_dec.t());
        assert!(p.theta.iter().all(|&t| t == c.theta_init));
        assert!(p.b_dec.iter().all(|&b| b == 0.5));
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let c = small_config();
        let a = train(&c, source(100_000), TrainOptions::default()).unwrap();
        let b = train(&c, source(100_000), TrainOptions { prefetch: true, ..TrainOptions::default() }).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.steps_completed, 40);
        assert!(a.params.theta.iter().all(|&t| t > 0.0));
    }

    #[test]
    fn short_source_truncates_with_warning() {
        let c = small_config();
        let out = train(&c, source(64 * 10), TrainOptions::default()).unwrap();
        assert!(out.log.truncated);
        assert_eq!(out.log.steps_completed, 10);
        assert_eq!(out.log.warnings.len(), 1);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let c = small_config();
        let src = Box::new(InMemorySource::new(Array2::ones((10, 5)), "w"));
        assert!(matches!(
            train(&c, src, TrainOptions::default()),
            Err(SaeError::Dimension { .. })
        ));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config();
        let full = train(&c, source(100_000), TrainOptions::default()).unwrap();

        let mut half = c.clone();
        half.total_tokens = 64 * 20;
        train(
            &half,
            source(100_000),
            TrainOptions {
                checkpoint_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let ck = crate::modelfile::read_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.step, 20);
        assert!(dir.path().join(CHECKPOINT_MODEL_FILE).exists());
        let resumed = train(
            &c,
            source(100_000),
            TrainOptions {
                resume: Some(ck),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.log.entries, full.log.entries);
        assert_eq!(resumed.params, full.params);
    }
}
