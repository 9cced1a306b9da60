use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{bail, Error, Result};
use crate::model::{ModelConfig, StageConfig};
use crate::ssl::SslConfig;

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            schedule: Schedule::Cosine,
        }
    }
}

/// Linear classifier trained on frozen, standardised encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Which pretrained weights to freeze when the checkpoint holds both.
    pub encoder: EncoderSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderSource {
    Student,
    Teacher,
}

impl EncoderSource {
    /// Name prefix of this copy inside a pretraining checkpoint.
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderSource::Student => "student/",
            EncoderSource::Teacher => "teacher/",
        }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-2,
            weight_decay: 1e-4,
            encoder: EncoderSource::Student,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Directory feature paths are relative to; defaults to each manifest's directory.
    pub features_dir: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    /// Log a training row every this many steps.
    pub every: usize,
    /// Record elapsed milliseconds; when off the column is written as 0.
    pub wall_ms: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            every: 10,
            wall_ms: true,
        }
    }
}

/// Everything a command needs, assembled from a config file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub ssl: SslConfig,
    pub probe: ProbeConfig,
    pub paths: PathsConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            optim: OptimConfig::default(),
            ssl: SslConfig::default(),
            probe: ProbeConfig::default(),
            paths: PathsConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!(Config, "{key}: expected a boolean, got {value:?}"),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// Strides are `s` (square) or `t:f`.
fn parse_strides(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|v| match v.trim().split_once(':') {
            Some((t, f)) => Ok((parse(key, t)?, parse(key, f)?)),
            None => {
                let s = parse(key, v.trim())?;
                Ok((s, s))
            }
        })
        .collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn from_file(file: &Path) -> Result<Self> {
        let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
        cfg.resolve_relative_to(file.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(Config, "line {}: expected `key = value`", n + 1);
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    fn resolve_relative_to(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.train_manifest,
            &mut p.test_manifest,
            &mut p.features_dir,
            &mut p.checkpoint_in,
            &mut p.checkpoint_out,
            &mut p.metrics_out,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.mel_bins" => m.mel_bins = parse(key, value)?,
            "model.frames" => m.frames = parse(key, value)?,
            "model.patch" => {
                let p = parse_strides(key, value)?;
                if p.len() != 1 {
                    bail!(Config, "{key}: expected one `t:f` pair");
                }
                m.patch = p[0];
            }
            "model.stem_dim" => m.stem_dim = parse(key, value)?,
            "model.num_classes" => m.num_classes = parse(key, value)?,
            "model.rpe" => m.rpe_enabled = parse_bool(key, value)?,
            "model.residual_pooling" => m.residual_pooling = parse_bool(key, value)?,
            "model.pool_kernel" => m.pool_kernel = parse(key, value)?,
            "model.pool_padding" => m.pool_padding = parse(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "model.depths" | "model.dims" | "model.heads" => {
                let v = parse_list(key, value)?;
                self.resize_stages(v.len());
                for (s, x) in self.model.stages.iter_mut().zip(v) {
                    match key {
                        "model.depths" => s.depth = x,
                        "model.dims" => s.dim = x,
                        _ => s.heads = x,
                    }
                }
            }
            "model.q_strides" | "model.kv_strides" => {
                let v = parse_strides(key, value)?;
                self.resize_stages(v.len());
                for (s, x) in self.model.stages.iter_mut().zip(v) {
                    if key == "model.q_strides" {
                        s.pool_q_stride = x;
                    } else {
                        s.pool_kv_stride = x;
                    }
                }
            }
            "optim.lr" => self.optim.lr = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "optim.batch_size" => self.optim.batch_size = parse(key, value)?,
            "optim.epochs" => self.optim.epochs = parse(key, value)?,
            "optim.seed" => self.optim.seed = parse(key, value)?,
            "optim.schedule" => {
                self.optim.schedule = match value {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    _ => bail!(Config, "{key}: expected cosine or constant, got {value:?}"),
                }
            }
            "ssl.tau" => self.ssl.tau = parse(key, value)?,
            "ssl.momentum" => self.ssl.momentum = parse(key, value)?,
            "ssl.patch_drop" => self.ssl.patch_drop = parse(key, value)?,
            "ssl.mixup_max" => self.ssl.mixup_max = parse(key, value)?,
            "probe.epochs" => self.probe.epochs = parse(key, value)?,
            "probe.lr" => self.probe.lr = parse(key, value)?,
            "probe.weight_decay" => self.probe.weight_decay = parse(key, value)?,
            "probe.encoder" => {
                self.probe.encoder = match value {
                    "student" => EncoderSource::Student,
                    "teacher" => EncoderSource::Teacher,
                    _ => bail!(Config, "{key}: expected student or teacher, got {value:?}"),
                }
            }
            "paths.train_manifest" => self.paths.train_manifest = path(value),
            "paths.test_manifest" => self.paths.test_manifest = path(value),
            "paths.features_dir" => self.paths.features_dir = path(value),
            "paths.checkpoint_in" => self.paths.checkpoint_in = path(value),
            "paths.checkpoint_out" => self.paths.checkpoint_out = path(value),
            "paths.metrics_out" => self.paths.metrics_out = path(value),
            "metrics.every" => self.metrics.every = parse(key, value)?,
            "metrics.wall_ms" => self.metrics.wall_ms = parse_bool(key, value)?,
            _ => bail!(Config, "unknown key {key:?}"),
        }
        Ok(())
    }

    fn resize_stages(&mut self, n: usize) {
        let stages = &mut self.model.stages;
        while stages.len() < n {
            let last = stages.last().cloned().unwrap_or(StageConfig {
                depth: 1,
                dim: self.model.stem_dim,
                heads: 1,
                pool_q_stride: (1, 1),
                pool_kv_stride: (1, 1),
            });
            stages.push(last);
        }
        stages.truncate(n);
    }

    /// Checks ranges that do not depend on the command.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            bail!(Config, "optim.lr must be finite and non-negative, got {}", o.lr);
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            bail!(Config, "optim betas must lie in [0, 1)");
        }
        if o.batch_size == 0 || o.epochs == 0 {
            bail!(Config, "optim.batch_size and optim.epochs must be positive");
        }
        let s = &self.ssl;
        if !(s.tau > 0.0) {
            bail!(Config, "ssl.tau must be positive, got {}", s.tau);
        }
        if !(0.0..=1.0).contains(&s.momentum) {
            bail!(Config, "ssl.momentum must lie in [0, 1], got {}", s.momentum);
        }
        if !(0.0..1.0).contains(&s.patch_drop) {
            bail!(Config, "ssl.patch_drop must lie in [0, 1), got {}", s.patch_drop);
        }
        if !(0.0..=1.0).contains(&s.mixup_max) {
            bail!(Config, "ssl.mixup_max must lie in [0, 1], got {}", s.mixup_max);
        }
        if self.metrics.every == 0 {
            bail!(Config, "metrics.every must be positive");
        }
        Ok(())
    }
}
