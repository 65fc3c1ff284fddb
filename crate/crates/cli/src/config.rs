//! Flat `section.key = value` experiment configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! command = sweep
//! seed = 7
//! network.width = 256
//! network.tau_mode = inverse_L
//! sweep.depths = 16, 64
//! ```
//!
//! Later assignments win, so command-line `--set` pairs appended after the
//! file contents override it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use reslab::theory::calibration::{DELTA, INPUT_DIM, OUTPUT_DIM, SAMPLES, TARGET_SCALE};
use reslab::trainer::{BatchMode, TrainConfig};
use reslab::{Arch, NetworkConfig, SeedSpec};

/// Environment variable consulted for the output directory when neither
/// `--out` nor `out_dir` is given.
pub const OUT_DIR_ENV: &str = "RESLAB_OUT";
pub const DEFAULT_OUT_DIR: &str = "reslab-out";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key}: invalid value `{value}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("{0}: required")]
    Missing(String),
    #[error("{key}: path `{path}` does not exist")]
    PathMissing { key: String, path: String },
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Verify,
    Explosion,
    Spectral,
    Sweep,
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Command::Train),
            "verify" => Ok(Command::Verify),
            "explosion" => Ok(Command::Explosion),
            "spectral" => Ok(Command::Spectral),
            "sweep" => Ok(Command::Sweep),
            _ => Err("expected train, verify, explosion, spectral or sweep".into()),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::Train => "train",
            Command::Verify => "verify",
            Command::Explosion => "explosion",
            Command::Spectral => "spectral",
            Command::Sweep => "sweep",
        };
        f.write_str(s)
    }
}

/// How `τ` is derived from the depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    #[serde(rename = "inverse_L")]
    InverseL,
    #[serde(rename = "inverse_sqrt_L")]
    InverseSqrtL,
    #[serde(rename = "inverse_quarter_L")]
    InverseQuarterL,
    Custom(f64),
}

impl FromStr for TauMode {
    type Err = String;
    /// `inverse_L`, `inverse_sqrt_L`, `inverse_quarter_L`, or `custom(v)`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inverse_L" => Ok(TauMode::InverseL),
            "inverse_sqrt_L" => Ok(TauMode::InverseSqrtL),
            "inverse_quarter_L" => Ok(TauMode::InverseQuarterL),
            _ => {
                let inner = s
                    .strip_prefix("custom(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or("expected inverse_L, inverse_sqrt_L, inverse_quarter_L or custom(<value>)")?;
                let v: f64 = inner.trim().parse().map_err(|e| format!("{e}"))?;
                Ok(TauMode::Custom(v))
            }
        }
    }
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauMode::InverseL => f.write_str("inverse_L"),
            TauMode::InverseSqrtL => f.write_str("inverse_sqrt_L"),
            TauMode::InverseQuarterL => f.write_str("inverse_quarter_L"),
            TauMode::Custom(v) => write!(f, "custom({v})"),
        }
    }
}

/// `τ` for depth `depth`.
pub fn resolve_tau(mode: TauMode, depth: usize) -> Result<f64, ConfigError> {
    if depth == 0 {
        return Err(invalid("network.depth", "0", "must be >= 1"));
    }
    let l = depth as f64;
    match mode {
        TauMode::InverseL => Ok(1.0 / l),
        TauMode::InverseSqrtL => Ok(1.0 / l.sqrt()),
        // two square roots are exact on perfect fourth powers, unlike powf
        TauMode::InverseQuarterL => Ok(1.0 / l.sqrt().sqrt()),
        TauMode::Custom(v) if v >= 0.0 && v.is_finite() => Ok(v),
        TauMode::Custom(v) => Err(invalid(
            "network.tau_mode",
            &mode.to_string(),
            format!("custom tau must be finite and >= 0, got {v}"),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { n: usize, delta: f64, target_scale: f64 },
    Idx { images: PathBuf, labels: PathBuf, subset_n: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSection {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub arch: Arch,
    pub tau_mode: TauMode,
}

impl NetworkSection {
    pub fn resolve(&self, depth: usize, width: usize, tau_mode: TauMode) -> Result<NetworkConfig, ConfigError> {
        let tau = resolve_tau(tau_mode, depth)?;
        let mut c = NetworkConfig::resnet(depth, width, self.input_dim, self.output_dim, tau);
        if self.arch == Arch::FeedForward {
            c = NetworkConfig::feedforward(depth, width, self.input_dim, self.output_dim);
        }
        c.validate()
            .map_err(|e| invalid("network", &format!("L={depth} m={width}"), e.to_string()))?;
        Ok(c)
    }

    pub fn network_config(&self) -> Result<NetworkConfig, ConfigError> {
        self.resolve(self.depth, self.width, self.tau_mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub steps: usize,
    /// `None` is full batch.
    pub batch_size: Option<usize>,
    /// Stop once `F <= target_fraction · F(W⁽⁰⁾)`, unless `target_eps` is set.
    pub target_fraction: f64,
    /// Absolute stopping threshold.
    pub target_eps: Option<f64>,
    pub drift_tracking: bool,
}

impl TrainSection {
    /// `initial_loss` is `F(W⁽⁰⁾)` on the full dataset.
    pub fn train_config(&self, initial_loss: f64, seed: SeedSpec) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch: self.batch_size.map_or(BatchMode::Full, BatchMode::Mini),
            target_eps: self.target_eps.unwrap_or(self.target_fraction * initial_loss),
            drift_tracking: self.drift_tracking,
            seed,
        }
    }
}

pub const CHECK_NAMES: [&str; 9] = [
    "spectral_product",
    "layer_norms",
    "explosion",
    "gradient_upper",
    "gradient_lower",
    "perturbation",
    "separateness",
    "semismooth",
    "drift",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySection {
    pub checks: Vec<String>,
    pub trials: usize,
    pub omega: f64,
    /// Allowed degradation relative to the frozen calibration constants.
    pub factor: f64,
    /// Explicit per-check constants. For `spectral_product` and
    /// `layer_norms` this is the slack `c`; elsewhere it replaces
    /// `factor × frozen` (every component, for the multi-part checks).
    pub constants: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSection {
    pub a: usize,
    /// `None` means `L − 1`.
    pub b: Option<usize>,
    pub seeds: usize,
    pub c: f64,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub tau_modes: Vec<TauMode>,
}

/// Fully resolved experiment description; the sidecar of every output file
/// records it verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub network: NetworkSection,
    pub data: DataSource,
    pub train: TrainSection,
    pub verify: VerifySection,
    pub explosion_trials: usize,
    pub spectral: SpectralSection,
    pub sweep: SweepSection,
}

/// Parse `key = value` lines into an ordered list of pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: line.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: line.to_string(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse a single `--set` argument.
pub fn parse_override(arg: &str) -> Result<(String, String), ConfigError> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::Syntax {
            line: 0,
            text: arg.to_string(),
        }),
    }
}

/// Resolve the final configuration: file pairs first, then `--set` pairs,
/// then the dedicated command-line values.
pub fn load(
    file: Option<&Path>,
    sets: &[String],
    command: Option<Command>,
    seed: Option<u64>,
    out_dir: Option<&Path>,
    out_dir_env: Option<&str>,
) -> Result<ExperimentConfig, ConfigError> {
    let mut pairs = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    for s in sets {
        pairs.push(parse_override(s)?);
    }
    if let Some(c) = command {
        pairs.push(("command".into(), c.to_string()));
    }
    if let Some(s) = seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = out_dir {
        pairs.push(("out_dir".into(), o.display().to_string()));
    }
    ExperimentConfig::from_pairs(&pairs, out_dir_env)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| invalid(key, &v, e.to_string())),
        }
    }

    fn take_opt(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(default),
            Some(v) => {
                let items: Result<Vec<T>, _> = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|e| invalid(key, s, e.to_string())))
                    .collect();
                let items = items?;
                if items.is_empty() {
                    return Err(invalid(key, &v, "empty list"));
                }
                Ok(items)
            }
        }
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, &v.to_string(), "must be positive"))
    }
}

impl ExperimentConfig {
    /// Build from pairs (later pairs win). `out_dir_env` is the value of
    /// [`OUT_DIR_ENV`], used when `out_dir` is absent.
    pub fn from_pairs(pairs: &[(String, String)], out_dir_env: Option<&str>) -> Result<Self, ConfigError> {
        let mut f = Fields(pairs.iter().cloned().collect());
        let command = f
            .take_opt("command")
            .ok_or_else(|| ConfigError::Missing("command".into()))?;
        let command: Command = command.parse().map_err(|e: String| invalid("command", &command, e))?;
        let seed = f.take("seed", 0u64)?;
        let out_dir = f
            .take_opt("out_dir")
            .or_else(|| out_dir_env.map(str::to_string))
            .unwrap_or_else(|| DEFAULT_OUT_DIR.to_string());

        let arch = match f.take_opt("network.arch").as_deref() {
            None | Some("resnet") => Arch::ResNet,
            Some("feedforward") => Arch::FeedForward,
            Some(other) => return Err(invalid("network.arch", other, "expected resnet or feedforward")),
        };
        let network = NetworkSection {
            depth: f.take("network.depth", 16usize)?,
            width: f.take("network.width", 128usize)?,
            input_dim: f.take("network.input_dim", INPUT_DIM)?,
            output_dim: f.take("network.output_dim", OUTPUT_DIM)?,
            arch,
            tau_mode: f.take("network.tau_mode", TauMode::InverseSqrtL)?,
        };

        let data = match f.take_opt("data.source").as_deref() {
            None | Some("synthetic") => DataSource::Synthetic {
                n: f.take("data.n", SAMPLES)?,
                delta: f.take("data.delta", DELTA)?,
                target_scale: f.take("data.target_scale", TARGET_SCALE)?,
            },
            Some("idx") => {
                let images = f
                    .take_opt("data.images")
                    .ok_or_else(|| ConfigError::Missing("data.images".into()))?;
                let labels = f
                    .take_opt("data.labels")
                    .ok_or_else(|| ConfigError::Missing("data.labels".into()))?;
                DataSource::Idx {
                    images: images.into(),
                    labels: labels.into(),
                    subset_n: f.take("data.subset_n", 100usize)?,
                }
            }
            Some(other) => return Err(invalid("data.source", other, "expected synthetic or idx")),
        };

        let batch_size = match f.take_opt("train.batch_size").as_deref() {
            None | Some("full") => None,
            Some(v) => Some(v.parse::<usize>().map_err(|e| invalid("train.batch_size", v, e.to_string()))?),
        };
        let train = TrainSection {
            learning_rate: positive("train.learning_rate", f.take("train.learning_rate", 0.001)?)?,
            steps: f.take("train.steps", 1000usize)?,
            batch_size,
            target_fraction: positive("train.target_fraction", f.take("train.target_fraction", 1e-3)?)?,
            target_eps: match f.take_opt("train.target_eps") {
                None => None,
                Some(v) => Some(positive(
                    "train.target_eps",
                    v.parse().map_err(|e: std::num::ParseFloatError| invalid("train.target_eps", &v, e.to_string()))?,
                )?),
            },
            drift_tracking: f.take("train.drift_tracking", true)?,
        };

        let mut constants = BTreeMap::new();
        let keys: Vec<String> = f.0.keys().filter(|k| k.starts_with("verify.constant.")).cloned().collect();
        for k in keys {
            let name = k["verify.constant.".len()..].to_string();
            if name == "explosion" || !CHECK_NAMES.contains(&name.as_str()) {
                return Err(ConfigError::UnknownKey(k));
            }
            constants.insert(name, f.take(&k, 0.0f64)?);
        }
        let verify = VerifySection {
            checks: f.take_list("verify.checks", vec!["spectral_product".to_string(), "layer_norms".to_string()])?,
            trials: f.take("verify.trials", 20usize)?,
            omega: f.take("verify.omega", 0.01)?,
            factor: positive("verify.factor", f.take("verify.factor", 2.0)?)?,
            constants,
        };
        for c in &verify.checks {
            if !CHECK_NAMES.contains(&c.as_str()) {
                return Err(invalid("verify.checks", c, format!("known checks: {}", CHECK_NAMES.join(", "))));
            }
        }

        let explosion_trials = f.take("explosion.trials", 500usize)?;
        let spectral = SpectralSection {
            a: f.take("spectral.a", 1usize)?,
            b: match f.take_opt("spectral.b") {
                None => None,
                Some(v) => Some(v.parse().map_err(|e: std::num::ParseIntError| invalid("spectral.b", &v, e.to_string()))?),
            },
            seeds: f.take("spectral.seeds", 20usize)?,
            c: f.take("spectral.c", 1.0)?,
            tol: positive("spectral.tol", f.take("spectral.tol", 1e-6)?)?,
        };
        let sweep = SweepSection {
            depths: f.take_list("sweep.depths", vec![network.depth])?,
            widths: f.take_list("sweep.widths", vec![network.width])?,
            tau_modes: f.take_list("sweep.tau_modes", vec![network.tau_mode])?,
        };

        if let Some(k) = f.0.keys().next() {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        let cfg = Self {
            command,
            seed,
            out_dir: out_dir.into(),
            network,
            data,
            train,
            verify,
            explosion_trials,
            spectral,
            sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-level checks beyond parsing, including that input paths exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.network_config()?;
        for &l in &self.sweep.depths {
            for &m in &self.sweep.widths {
                for &t in &self.sweep.tau_modes {
                    self.network.resolve(l, m, t)?;
                }
            }
        }
        if self.train.steps == 0 {
            return Err(invalid("train.steps", "0", "must be >= 1"));
        }
        if self.train.batch_size == Some(0) {
            return Err(invalid("train.batch_size", "0", "must be >= 1 or `full`"));
        }
        match &self.data {
            DataSource::Synthetic { n, delta, target_scale } => {
                if *n == 0 {
                    return Err(invalid("data.n", "0", "must be >= 1"));
                }
                if !(0.0..=2.0).contains(delta) {
                    return Err(invalid("data.delta", &delta.to_string(), "must lie in [0, 2]"));
                }
                if !(*target_scale >= 0.0) {
                    return Err(invalid("data.target_scale", &target_scale.to_string(), "must be >= 0"));
                }
            }
            DataSource::Idx { images, labels, subset_n } => {
                for (key, p) in [("data.images", images), ("data.labels", labels)] {
                    if !Path::new(p).exists() {
                        return Err(ConfigError::PathMissing {
                            key: key.into(),
                            path: p.display().to_string(),
                        });
                    }
                }
                if *subset_n == 0 {
                    return Err(invalid("data.subset_n", "0", "must be >= 1"));
                }
            }
        }
        if self.verify.trials == 0 {
            return Err(invalid("verify.trials", "0", "must be >= 1"));
        }
        if self.command == Command::Explosion && self.explosion_trials < 30 {
            return Err(invalid(
                "explosion.trials",
                &self.explosion_trials.to_string(),
                "must be >= 30",
            ));
        }
        if self.spectral.seeds == 0 {
            return Err(invalid("spectral.seeds", "0", "must be >= 1"));
        }
        Ok(())
    }

    /// Seed of sweep cell `index` (and of the single cell of other commands).
    pub fn cell_seed(&self, index: usize) -> SeedSpec {
        SeedSpec::new(self.seed.wrapping_add(index as u64))
    }
}
