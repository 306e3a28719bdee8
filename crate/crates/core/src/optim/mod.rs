//! Optimization: hyperparameters, warmup schedules, global-norm clipping,
//! Adam, and the training loop in [`train`].

pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::grad::{param_blocks_mut, Gradients};
use crate::kernel;
use crate::model::SaeParams;

pub use train::{train, Checkpoint, LogEntry, TrainLog, TrainOptions, TrainOutcome};

/// Every knob of a training run. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dict_size: usize,
    /// Activation width; 0 means "take it from the data source".
    pub input_dim: usize,
    pub l0_target: f64,
    pub lambda: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epsilon_bandwidth: f64,
    pub lr_warmup_steps: u64,
    pub sparsity_warmup_steps: u64,
    pub clip_max_norm: f64,
    pub total_tokens: u64,
    pub batch_tokens: usize,
    pub seed: u64,
    pub eval_interval: u64,
    /// Name of the pseudo-derivative kernel, see [`kernel::registry`].
    pub kernel: String,
    /// Shuffle buffer size in rows.
    pub buffer_capacity: usize,
    /// Passes over the source before it counts as exhausted.
    pub max_epochs: u64,
    pub theta_init: f64,
    /// Thresholds are clamped to at least this after every update.
    pub theta_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dict_size: 16_384,
            input_dim: 0,
            l0_target: 20.0,
            lambda: 1.0,
            lr: 7e-5,
            adam_beta1: 0.0,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epsilon_bandwidth: 0.001,
            lr_warmup_steps: 1_000,
            sparsity_warmup_steps: 5_000,
            clip_max_norm: 1.0,
            total_tokens: 49_000_000,
            batch_tokens: 2_048,
            seed: 0,
            eval_interval: 100,
            kernel: "rect".into(),
            buffer_capacity: 65_536,
            max_epochs: 1,
            theta_init: 0.001,
            theta_floor: 1e-6,
        }
    }
}

impl TrainConfig {
    /// Number of optimizer updates the token budget allows.
    pub fn total_steps(&self) -> u64 {
        self.total_tokens / self.batch_tokens.max(1) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(SaeError::Config(format!("`{key}` {why}")));
        if self.dict_size == 0 {
            return bad("dict_size", "must be at least 1".into());
        }
        if self.input_dim == 0 {
            return bad("input_dim", "must be at least 1".into());
        }
        if !(self.l0_target > 0.0) {
            return bad("l0_target", format!("must be positive, got {}", self.l0_target));
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", format!("must be non-negative, got {}", self.lambda));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr", format!("must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", format!("must lie in [0, 1), got {}", self.adam_beta1));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", format!("must lie in [0, 1), got {}", self.adam_beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", format!("must be positive, got {}", self.adam_eps));
        }
        if !(self.epsilon_bandwidth > 0.0) {
            return bad(
                "epsilon_bandwidth",
                format!("must be positive, got {}", self.epsilon_bandwidth),
            );
        }
        if !(self.clip_max_norm > 0.0) {
            return bad("clip_max_norm", format!("must be positive, got {}", self.clip_max_norm));
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens", "must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be at least 1".into());
        }
        if self.buffer_capacity < self.batch_tokens {
            return bad(
                "buffer_capacity",
                format!("({}) must hold at least one batch ({})", self.buffer_capacity, self.batch_tokens),
            );
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1".into());
        }
        if !(self.theta_init > 0.0) {
            return bad("theta_init", format!("must be positive, got {}", self.theta_init));
        }
        if !(self.theta_floor > 0.0) {
            return bad("theta_floor", format!("must be positive, got {}", self.theta_floor));
        }
        kernel::by_name(&self.kernel)?;
        Ok(())
    }
}

fn warmup(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Linear learning-rate warmup: `lr * min(1, step / lr_warmup_steps)`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    config.lr * warmup(step, config.lr_warmup_steps)
}

/// Linear sparsity-coefficient warmup.
pub fn sparsity_schedule(step: u64, config: &TrainConfig) -> f64 {
    config.lambda * warmup(step, config.sparsity_warmup_steps)
}

/// Scale all gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(g: &mut Gradients, max_norm: f64) -> f64 {
    let norm = g.global_norm();
    if norm > max_norm {
        g.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &SaeParams) -> Self {
        AdamState {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place; thresholds are clamped to
/// `config.theta_floor` afterwards.
pub fn adam_step(
    params: &mut SaeParams,
    g: &Gradients,
    state: &mut AdamState,
    lr_now: f64,
    config: &TrainConfig,
) -> Result<()> {
    let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
    let t = state.step + 1;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);

    let mut next = params.clone();
    let mut next_state = state.clone();
    {
        let p_blocks = param_blocks_mut(&mut next);
        let m_blocks = next_state.m.blocks_mut();
        let mut v_blocks = next_state.v.blocks_mut();
        for (((p, m), v), grad) in p_blocks
            .into_iter()
            .zip(m_blocks)
            .zip(v_blocks.iter_mut())
            .zip(g.blocks())
        {
            for (((p, m), v), &gr) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                *m = b1 * *m + (1.0 - b1) * gr;
                *v = b2 * *v + (1.0 - b2) * gr * gr;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr_now * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    let floor = config.theta_floor;
    next.theta.mapv_inplace(|t| t.max(floor));
    let finite = param_blocks_mut(&mut next)
        .iter()
        .all(|b| b.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(SaeError::Numeric(format!(
            "Adam update {t} produced a non-finite parameter"
        )));
    }
    next_state.step = t;
    *params = next;
    *state = next_state;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_are_the_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 7e-5);
        assert_eq!((c.adam_beta1, c.adam_beta2), (0.0, 0.999));
        assert_eq!(c.epsilon_bandwidth, 0.001);
        assert_eq!(c.lr_warmup_steps, 1000);
        assert_eq!(c.sparsity_warmup_steps, 5000);
        assert_eq!(c.clip_max_norm, 1.0);
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.batch_tokens, 2048);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"dict_size": 8, "learning_rate": 1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        let ok: TrainConfig = serde_json::from_str(r#"{"dict_size": 8}"#).unwrap();
        assert_eq!(ok.dict_size, 8);
        assert_eq!(ok.lr, 7e-5);
    }

    #[test]
    fn validate_names_the_offending_key() {
        let mut c = TrainConfig {
            input_dim: 4,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_ok());
        c.adam_beta2 = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("adam_beta2"));
        c.adam_beta2 = 0.999;
        c.kernel = "box".into();
        assert!(c.validate().unwrap_err().to_string().contains("box"));
    }

    #[test]
    fn lr_schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert!((lr_schedule(500, &c) - 3.5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(1000, &c), 7e-5);
        assert_eq!(lr_schedule(123_456, &c), 7e-5);
    }

    #[test]
    fn sparsity_schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(sparsity_schedule(0, &c), 0.0);
        assert_eq!(sparsity_schedule(2500, &c), 0.5);
        assert_eq!(sparsity_schedule(5000, &c), 1.0);
        assert_eq!(sparsity_schedule(9999, &c), 1.0);
    }

    #[test]
    fn schedules_are_monotone_and_plateau_exactly() {
        let c = TrainConfig::default();
        let mut prev = (0.0, 0.0);
        for step in 0..6000 {
            let cur = (lr_schedule(step, &c), sparsity_schedule(step, &c));
            assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
            assert_eq!(cur.0 == c.lr, step >= 1000);
            assert_eq!(cur.1 == c.lambda, step >= 5000);
            prev = cur;
        }
    }

    fn grads_from(rng: &mut ChaCha8Rng, scale: f64) -> Gradients {
        let mut p = SaeParams::zeros(3, 4, 0.1);
        p.theta.fill(0.1);
        let mut g = Gradients::zeros_like(&p);
        for b in g.blocks_mut() {
            b.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0) * scale);
        }
        g
    }

    #[test]
    fn clipping_cases() {
        let p = SaeParams::zeros(1, 1, 0.1);
        let mut g = Gradients::zeros_like(&p);
        g.g_b_dec[0] = 2.0;
        let before = clip_gradients(&mut g, 1.0);
        assert_eq!(before, 2.0);
        assert_eq!(g.g_b_dec[0], 1.0);

        let mut g = Gradients::zeros_like(&p);
        g.g_theta[0] = 0.3;
        g.g_b_enc[0] = 0.4;
        let copy = g.clone();
        clip_gradients(&mut g, 1.0);
        assert_eq!(g, copy);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let scale = rng.random_range(0.01..3.0);
            let mut g = grads_from(&mut rng, scale);
            let orig = g.global_norm();
            clip_gradients(&mut g, 1.0);
            assert!((g.global_norm() - orig.min(1.0)).abs() < 1e-9);
        }
    }

    fn scalar_params() -> SaeParams {
        SaeParams {
            w_enc: Array2::zeros((1, 1)),
            b_enc: Array1::zeros(1),
            w_dec: Array2::zeros((1, 1)),
            b_dec: Array1::zeros(1),
            theta: Array1::from_elem(1, 1.0),
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let c = TrainConfig::default();
        let mut p = scalar_params();
        let orig = p.clone();
        let mut s = AdamState::new(&p);
        let g = Gradients::zeros_like(&p);
        adam_step(&mut p, &g, &mut s, 0.1, &c).unwrap();
        assert_eq!(p, orig);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let c = TrainConfig::default();
        let mut p = scalar_params();
        let mut s = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.g_b_dec[0] = 4.0;
        adam_step(&mut p, &g, &mut s, 0.1, &c).unwrap();
        assert!((s.v.g_b_dec[0] - 0.016).abs() < 1e-15);
        let expected = -0.1 * 4.0 / (4.0 + 1e-8);
        assert!((p.b_dec[0] - expected).abs() < 1e-15);

        // With beta1 = 0 each first step has magnitude ~lr in the sign direction.
        for gv in [-7.0, -0.01, 0.5, 123.0] {
            let mut p = scalar_params();
            let mut s = AdamState::new(&p);
            let mut g = Gradients::zeros_like(&p);
            g.g_w_enc[[0, 0]] = gv;
            adam_step(&mut p, &g, &mut s, 0.1, &c).unwrap();
            let delta = p.w_enc[[0, 0]];
            assert!((delta + 0.1 * gv.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_keeps_thresholds_positive() {
        let c = TrainConfig::default();
        let mut p = scalar_params();
        p.theta[0] = 0.01;
        let mut s = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.g_theta[0] = 1.0;
        adam_step(&mut p, &g, &mut s, 0.5, &c).unwrap();
        assert_eq!(p.theta[0], c.theta_floor);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let c = TrainConfig::default();
        let mut p = scalar_params();
        let orig = p.clone();
        let mut s = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.g_b_enc[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, 0.1, &c),
            Err(SaeError::Numeric(_))
        ));
        assert_eq!(p, orig);
    }
}
