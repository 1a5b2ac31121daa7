//! Flat run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mrf::dict::{GridRange, MatchNorm};
use mrf::error::{Error, Result};
use mrf::eval::SnrConvention;
use mrf::lowrank::RestoreConfig;
use mrf::net::{InputMode, NetConfig, TrainConfig};
use mrf::sequence::{generate_fisp, FispConfig, SequenceParams};

fn d_frames() -> usize {
    200
}
fn d_t1_min() -> f64 {
    100.0
}
fn d_t1_max() -> f64 {
    2000.0
}
fn d_t1_step() -> f64 {
    100.0
}
fn d_t2_min() -> f64 {
    10.0
}
fn d_t2_max() -> f64 {
    100.0
}
fn d_t2_step() -> f64 {
    10.0
}
fn d_beta() -> f64 {
    0.15
}
fn d_sigma_frac() -> f64 {
    0.25
}
fn d_lambda() -> f64 {
    5.0
}
fn d_mu() -> f64 {
    1.0
}
fn d_tol() -> f64 {
    1e-4
}
fn d_max_iters() -> usize {
    200
}
fn d_base_channels() -> usize {
    16
}
fn d_n_blocks() -> usize {
    4
}
fn d_kernel_size() -> usize {
    21
}
fn d_true() -> bool {
    true
}
fn d_maxnorm_c() -> f64 {
    2.0
}
fn d_scale_t1() -> f64 {
    5000.0
}
fn d_scale_t2() -> f64 {
    2000.0
}
fn d_net_input() -> String {
    "mag".to_string()
}
fn d_epochs() -> usize {
    50
}
fn d_batch_size() -> usize {
    256
}
fn d_initial_lr() -> f64 {
    1e-2
}
fn d_lr_decay() -> f64 {
    0.1
}
fn d_lr_decay_every() -> usize {
    10
}
fn d_lr_floor() -> f64 {
    1e-6
}
fn d_validation_fraction() -> f64 {
    0.2
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_epsilon() -> f64 {
    1e-8
}
fn d_match_norm() -> String {
    "sq".to_string()
}
fn d_snr_convention() -> String {
    "paper".to_string()
}
fn d_bench_k() -> usize {
    16384
}
fn d_bench_reps() -> usize {
    5
}
fn d_bench_probes() -> usize {
    64
}
fn d_t1_display_max() -> f64 {
    2500.0
}
fn d_t2_display_max() -> f64 {
    350.0
}

/// Every pipeline parameter in one flat document.
///
/// Unknown keys are rejected; the five seeds must be explicit. `--seed S`
/// overrides all of them as `S, S+1, S+2, S+3, S+4` in field order below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_frames")]
    pub frames: usize,
    pub sequence_seed: u64,
    pub mask_seed: u64,
    pub net_init_seed: u64,
    pub train_seed: u64,
    pub bench_seed: u64,

    #[serde(default = "d_t1_min")]
    pub t1_min_ms: f64,
    #[serde(default = "d_t1_max")]
    pub t1_max_ms: f64,
    #[serde(default = "d_t1_step")]
    pub t1_step_ms: f64,
    #[serde(default = "d_t2_min")]
    pub t2_min_ms: f64,
    #[serde(default = "d_t2_max")]
    pub t2_max_ms: f64,
    #[serde(default = "d_t2_step")]
    pub t2_step_ms: f64,

    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_sigma_frac")]
    pub sigma_frac: f64,

    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_mu")]
    pub mu: f64,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub use_projector: bool,

    #[serde(default = "d_base_channels")]
    pub base_channels: usize,
    #[serde(default = "d_n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "d_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "d_true")]
    pub nonlocal_enabled: bool,
    #[serde(default = "d_maxnorm_c")]
    pub maxnorm_c: f64,
    #[serde(default = "d_scale_t1")]
    pub target_scale_t1: f64,
    #[serde(default = "d_scale_t2")]
    pub target_scale_t2: f64,
    #[serde(default = "d_net_input")]
    pub net_input: String,

    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_initial_lr")]
    pub initial_lr: f64,
    #[serde(default = "d_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_lr_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "d_lr_floor")]
    pub lr_floor: f64,
    #[serde(default = "d_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,

    #[serde(default = "d_match_norm")]
    pub match_norm: String,
    #[serde(default = "d_snr_convention")]
    pub snr_convention: String,

    #[serde(default)]
    pub threads: usize,

    #[serde(default = "d_bench_k")]
    pub bench_k: usize,
    #[serde(default = "d_bench_reps")]
    pub bench_reps: usize,
    #[serde(default = "d_bench_probes")]
    pub bench_probes: usize,

    #[serde(default = "d_t1_display_max")]
    pub t1_display_max: f64,
    #[serde(default = "d_t2_display_max")]
    pub t2_display_max: f64,

    #[serde(default)]
    pub input_path: Option<String>,
    #[serde(default)]
    pub dict_dir: Option<String>,
    #[serde(default)]
    pub model_path: Option<String>,
    #[serde(default)]
    pub kspace_dir: Option<String>,
    #[serde(default)]
    pub reference_dir: Option<String>,
    #[serde(default)]
    pub eval_t1_path: Option<String>,
    #[serde(default)]
    pub eval_t2_path: Option<String>,
}

impl RunConfig {
    /// Parses a config file, mapping JSON problems to parameter errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("cli: reading config {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parameter(format!("cli: config {}: {e}", path.display())))
    }

    /// Derives every seed from one master value.
    pub fn apply_seed(&mut self, seed: u64) {
        self.sequence_seed = seed;
        self.mask_seed = seed.wrapping_add(1);
        self.net_init_seed = seed.wrapping_add(2);
        self.train_seed = seed.wrapping_add(3);
        self.bench_seed = seed.wrapping_add(4);
    }

    /// The acquisition schedule described by this config.
    pub fn sequence(&self) -> Result<SequenceParams> {
        generate_fisp(&FispConfig::new(self.frames, self.sequence_seed))
    }

    /// T1 and T2 grid ranges.
    pub fn grid(&self) -> Result<(GridRange, GridRange)> {
        Ok((
            GridRange::new(self.t1_min_ms, self.t1_max_ms, self.t1_step_ms)?,
            GridRange::new(self.t2_min_ms, self.t2_max_ms, self.t2_step_ms)?,
        ))
    }

    /// Network architecture for signatures of `frames` samples.
    pub fn net_config(&self) -> Result<NetConfig> {
        Ok(NetConfig {
            input_length: self.frames,
            base_channels: self.base_channels,
            n_blocks: self.n_blocks,
            kernel_size: self.kernel_size,
            nonlocal_enabled: self.nonlocal_enabled,
            maxnorm_c: self.maxnorm_c,
            target_scale: (self.target_scale_t1, self.target_scale_t2),
            input_mode: self.net_input.parse::<InputMode>()?,
        })
    }

    /// Optimizer settings.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            initial_lr: self.initial_lr,
            lr_decay: self.lr_decay,
            lr_decay_every: self.lr_decay_every,
            lr_floor: self.lr_floor,
            validation_fraction: self.validation_fraction,
            seed: self.train_seed,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Restoration settings with an optional row-space projector.
    pub fn restore_config(
        &self,
        projector: Option<ndarray::Array2<num_complex::Complex64>>,
    ) -> RestoreConfig {
        RestoreConfig {
            mu: self.mu,
            lambda: self.lambda,
            tol: self.tol,
            max_iters: self.max_iters,
            projector,
        }
    }

    /// Matching score convention.
    pub fn match_norm(&self) -> Result<MatchNorm> {
        self.match_norm.parse::<MatchNorm>()
    }

    /// SNR reporting convention.
    pub fn snr(&self) -> Result<SnrConvention> {
        self.snr_convention.parse::<SnrConvention>()
    }
}
