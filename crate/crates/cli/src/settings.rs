//! Hyperparameters from flags, an optional JSON config file and `DOBI_SEED`.

use std::fmt;
use std::path::Path;

use clap::Args;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use svdcomp::autodiff::BackwardConfig;
use svdcomp::model::TaskKind;
use svdcomp::rank::{CompressionTarget, RatioCounting};
use svdcomp::train::{RankInit, TrainConfig};
use svdcomp::update::UpdateConfig;

pub const SEED_ENV: &str = "DOBI_SEED";

/// Failure of a command, with the process exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<svdcomp::error::Error> for CliError {
    fn from(e: svdcomp::error::Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

/// Parses an enum flag through its serde name, e.g. `char_lm`.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Every tunable knob. A flag wins over the config file; the seed falls back
/// to `DOBI_SEED` and then to 0.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Knobs {
    /// JSON file with any of these settings under their snake_case names.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<std::path::PathBuf>,
    /// teacher_student_regression or char_lm.
    #[arg(long, value_parser = parse_enum::<TaskKind>)]
    pub kind: Option<TaskKind>,
    /// Seed for data, shuffling and random cases [env: DOBI_SEED, default 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of samples (gen-data) or of matrices (gradcheck).
    #[arg(long)]
    pub count: Option<usize>,
    /// Target compression ratio in (0, 1] [default 0.6].
    #[arg(long)]
    pub target_ratio: Option<f64>,
    /// Smooth-mask sharpness [default 10].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Weight of |R_now − R_target| in the loss [default 10].
    #[arg(long)]
    pub penalty_weight: Option<f64>,
    /// Training epochs [default 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per step [default 32].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak Adam learning rate on the ranks, cosine-decayed [default 0.1].
    #[arg(long)]
    pub lr: Option<f64>,
    /// remapped or traditional.
    #[arg(long, value_parser = parse_enum::<RatioCounting>)]
    pub counting: Option<RatioCounting>,
    /// full or target.
    #[arg(long, value_parser = parse_enum::<RankInit>)]
    pub init: Option<RankInit>,
    /// Singular-value floor in the backward pass [default 1e-12].
    #[arg(long)]
    pub eps_val: Option<f64>,
    /// Reciprocal used when both values sit at the floor [default 1e-10].
    #[arg(long)]
    pub eps_grad: Option<f64>,
    /// Gap below which the truncated series is used [default 1e-6].
    #[arg(long)]
    pub eps_diff: Option<f64>,
    /// Series terms [default 10].
    #[arg(long)]
    pub n_taylor: Option<u32>,
    /// Centered IPCA.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub centered: Option<bool>,
    /// Calibration samples generated by `pipeline`.
    #[arg(long)]
    pub calib_count: Option<usize>,
    /// Evaluation samples generated by `pipeline`.
    #[arg(long)]
    pub eval_count: Option<usize>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub kind: TaskKind,
    pub seed: u64,
    pub count: Option<usize>,
    pub target: CompressionTarget,
    pub train: TrainConfig,
    pub update: UpdateConfig,
    pub calib_count: usize,
    pub eval_count: usize,
}

pub const DEFAULT_SAMPLES: usize = 64;

impl Knobs {
    fn or(self, file: Knobs) -> Knobs {
        Knobs {
            config: self.config,
            kind: self.kind.or(file.kind),
            seed: self.seed.or(file.seed),
            count: self.count.or(file.count),
            target_ratio: self.target_ratio.or(file.target_ratio),
            beta: self.beta.or(file.beta),
            penalty_weight: self.penalty_weight.or(file.penalty_weight),
            epochs: self.epochs.or(file.epochs),
            batch_size: self.batch_size.or(file.batch_size),
            lr: self.lr.or(file.lr),
            counting: self.counting.or(file.counting),
            init: self.init.or(file.init),
            eps_val: self.eps_val.or(file.eps_val),
            eps_grad: self.eps_grad.or(file.eps_grad),
            eps_diff: self.eps_diff.or(file.eps_diff),
            n_taylor: self.n_taylor.or(file.n_taylor),
            centered: self.centered.or(file.centered),
            calib_count: self.calib_count.or(file.calib_count),
            eval_count: self.eval_count.or(file.eval_count),
        }
    }

    /// Applies the file, the environment and the defaults, then validates.
    pub fn resolve(&self) -> Result<Settings, CliError> {
        let file = match &self.config {
            Some(path) => read_config(path)?,
            None => Knobs::default(),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
            ),
            Err(_) => None,
        };
        let k = self.clone().or(file);
        let seed = k.seed.or(env_seed).unwrap_or(0);
        let defaults = TrainConfig::default();
        let bw = BackwardConfig::default();
        let train = TrainConfig {
            beta: k.beta.unwrap_or(defaults.beta),
            epochs: k.epochs.unwrap_or(defaults.epochs),
            batch_size: k.batch_size.unwrap_or(defaults.batch_size),
            lr: k.lr.unwrap_or(defaults.lr),
            counting: k.counting.unwrap_or(defaults.counting),
            init: k.init.unwrap_or(defaults.init),
            seed,
            backward: BackwardConfig {
                eps_val: k.eps_val.unwrap_or(bw.eps_val),
                eps_grad: k.eps_grad.unwrap_or(bw.eps_grad),
                eps_diff: k.eps_diff.unwrap_or(bw.eps_diff),
                n_taylor: k.n_taylor.unwrap_or(bw.n_taylor),
                skew: bw.skew,
            },
            ..defaults
        };
        train.validate().map_err(|e| CliError::usage(e.to_string()))?;
        let target = CompressionTarget::new(
            k.target_ratio.unwrap_or(CompressionTarget::default().r_target),
            k.penalty_weight.unwrap_or(CompressionTarget::DEFAULT_PENALTY_WEIGHT),
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
        let positive = |v: Option<usize>, name: &str| -> Result<usize, CliError> {
            match v {
                Some(0) => Err(CliError::usage(format!("--{name} must be at least 1"))),
                Some(v) => Ok(v),
                None => Ok(DEFAULT_SAMPLES),
            }
        };
        Ok(Settings {
            kind: k.kind.unwrap_or(TaskKind::CharLm),
            seed,
            count: k.count,
            target,
            train,
            update: UpdateConfig { centered: k.centered.unwrap_or(false) },
            calib_count: positive(k.calib_count, "calib-count")?,
            eval_count: positive(k.eval_count, "eval-count")?,
        })
    }
}

fn read_config(path: &Path) -> Result<Knobs, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
}
