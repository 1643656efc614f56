//! Experiment configuration (TOML). Every key carries its unit in the name;
//! unknown keys are rejected with the offending key in the message.

use ldbp::channel::{AmplifierConfig, FiberParams};
use ldbp::experiment::Scenario;
use ldbp::rng::derive_seed;
use ldbp::training::{Decay, OptimizerKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    /// Root of every random stream in the experiment.
    pub seed: u64,
    pub link: LinkConfig,
    #[serde(default)]
    pub signal: SignalConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub n_spans: usize,
    pub span_length_km: f64,
    #[serde(default = "d_beta2")]
    pub beta2_ps2_per_km: f64,
    #[serde(default = "d_gamma")]
    pub gamma_per_w_km: f64,
    #[serde(default = "d_alpha")]
    pub alpha_db_per_km: f64,
    #[serde(default = "d_steps")]
    pub sim_steps_per_span: usize,
    #[serde(default)]
    pub ase_noise: bool,
    #[serde(default = "d_nf")]
    pub noise_figure_db: f64,
}

fn d_beta2() -> f64 {
    -21.7
}
fn d_gamma() -> f64 {
    1.3
}
fn d_alpha() -> f64 {
    0.2
}
fn d_steps() -> usize {
    50
}
fn d_nf() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub symbol_rate_gbaud: f64,
    pub modulation_order: usize,
    pub rrc_rolloff: f64,
    pub rrc_span_symbols: usize,
    pub tx_samples_per_symbol: usize,
    pub rx_samples_per_symbol: usize,
    pub frame_symbols: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        let s = Scenario::default();
        Self {
            symbol_rate_gbaud: s.symbol_rate / 1e9,
            modulation_order: s.modulation,
            rrc_rolloff: s.rolloff,
            rrc_span_symbols: s.rrc_span,
            tx_samples_per_symbol: s.tx_sps,
            rx_samples_per_symbol: s.rx_sps,
            frame_symbols: s.frame_symbols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_frames: usize,
    pub eval_frames: usize,
    /// Launch powers of the evaluation sweep.
    pub sweep_dbm: Vec<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_frames: 4,
            eval_frames: 2,
            sweep_dbm: (-6..=6).map(f64::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dbp,
    Subband,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_steps: usize,
    /// Tap counts cycled over the steps (`[5, 3]` alternates).
    pub taps: Vec<usize>,
    /// Fraction of the receiver band used by the least-squares initializer.
    #[serde(default = "d_band")]
    pub fit_band: f64,
    /// Iterations of the linear cascade pre-fit (0 disables it).
    #[serde(default)]
    pub prefit_iterations: usize,
    #[serde(default = "d_subbands")]
    pub n_subbands: usize,
    /// Dense coupling tensor length; ignored when `cascade_lengths` is set.
    #[serde(default = "d_dense")]
    pub coupling_len: usize,
    #[serde(default)]
    pub cascade_lengths: Option<Vec<usize>>,
}

fn d_band() -> f64 {
    1.0
}
fn d_subbands() -> usize {
    3
}
fn d_dense() -> usize {
    13
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub power_dbm: f64,
    pub iterations: usize,
    /// Overrides `training.step_size` for this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Successive training stages; parameters carry over, the optimizer restarts.
    pub stages: Vec<StageConfig>,
    pub optimizer: OptimizerKind,
    pub step_size: f64,
    pub decay: Decay,
    pub batch_size: usize,
    pub window_symbols: usize,
    #[serde(default)]
    pub l1_weight: f64,
    #[serde(default)]
    pub prune_threshold: f64,
    #[serde(default)]
    pub fake_quant_bits: Option<u32>,
    /// Iterations between checkpoints (0 disables checkpoints).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stages: vec![StageConfig {
                power_dbm: 0.0,
                iterations: 1000,
                step_size: None,
            }],
            optimizer: OptimizerKind::Adam,
            step_size: 1e-3,
            decay: Decay::HalveThirds,
            batch_size: 4,
            window_symbols: 128,
            l1_weight: 0.0,
            prune_threshold: 0.0,
            fake_quant_bits: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Extra guard symbols on top of the model and matched-filter memory.
    pub guard_margin_symbols: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            guard_margin_symbols: 2,
        }
    }
}

/// Seed stream labels.
pub mod stream {
    pub const TRAIN_DATA: u64 = 1;
    pub const EVAL_DATA: u64 = 2;
    pub const AMPLIFIER: u64 = 3;
    pub const TRAINING: u64 = 4;
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        self.scenario().validate().map_err(|e| CliError::Config(format!("link/signal: {e}")))?;
        let m = &self.model;
        if m.n_steps == 0 || m.taps.is_empty() || m.taps.iter().any(|k| *k == 0) {
            return Err(CliError::Config("model.taps: need at least one positive tap count".into()));
        }
        if m.kind == ModelKind::Dbp && m.taps.iter().any(|k| k % 2 == 0) {
            return Err(CliError::Config("model.taps: folded DBP filters need odd lengths".into()));
        }
        if !(m.fit_band > 0.0 && m.fit_band <= 1.0) {
            return Err(CliError::Config("model.fit_band: must lie in (0, 1]".into()));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.window_symbols == 0 || !(t.step_size > 0.0) {
            return Err(CliError::Config(
                "training: batch_size, window_symbols and step_size must be positive".into(),
            ));
        }
        if t.stages.iter().any(|s| s.step_size.is_some_and(|a| !(a > 0.0))) {
            return Err(CliError::Config("training.stages.step_size: must be positive".into()));
        }
        if let Some(b) = t.fake_quant_bits {
            if !(2..=16).contains(&b) {
                return Err(CliError::Config("training.fake_quant_bits: must lie in 2..=16".into()));
            }
        }
        if self.dataset.train_frames == 0 || self.dataset.eval_frames == 0 {
            return Err(CliError::Config("dataset: need at least one training and one evaluation frame".into()));
        }
        Ok(())
    }

    pub fn fiber(&self) -> FiberParams {
        FiberParams {
            beta2: self.link.beta2_ps2_per_km,
            gamma: self.link.gamma_per_w_km,
            alpha_db: self.link.alpha_db_per_km,
            span_length: self.link.span_length_km,
            n_spans: self.link.n_spans,
        }
    }

    pub fn scenario(&self) -> Scenario {
        let s = &self.signal;
        Scenario {
            fiber: self.fiber(),
            symbol_rate: s.symbol_rate_gbaud * 1e9,
            modulation: s.modulation_order,
            rolloff: s.rrc_rolloff,
            rrc_span: s.rrc_span_symbols,
            tx_sps: s.tx_samples_per_symbol,
            rx_sps: s.rx_samples_per_symbol,
            frame_symbols: s.frame_symbols,
            steps_per_span: self.link.sim_steps_per_span,
            dual_pol: false,
            amplifier: AmplifierConfig {
                gain_db: None,
                noise_figure_db: self.link.noise_figure_db,
                noise_enabled: self.link.ase_noise,
                seed: derive_seed(self.seed, &[stream::AMPLIFIER]),
            },
        }
    }

    pub fn seed_of(&self, stream: u64) -> u64 {
        derive_seed(self.seed, &[stream])
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Digest of the parts that determine the data set.
    pub fn data_digest(&self) -> String {
        let json = serde_json::to_vec(&(&self.seed, &self.link, &self.signal, &self.dataset))
            .expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn tap_counts(&self) -> Vec<usize> {
        (0..self.model.n_steps)
            .map(|i| self.model.taps[i % self.model.taps.len()])
            .collect()
    }
}
