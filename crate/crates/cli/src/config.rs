//! Line-based run configuration: `section.key = value`, `#` comments.
//!
//! ```text
//! # desk run
//! model.variant = visa
//! optimizer.initial_lr = 1e-3
//! data.scheme = kfold:4
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use visa_core::eval::SplitKind;
use visa_core::model::{ModelConfig, Variant};
use visa_core::synth::SynthConfig;
use visa_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub scheme: SplitKind,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            scheme: SplitKind::KFold(4),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn value<T: FromStr>(raw: &str) -> std::result::Result<T, String> {
    raw.parse().map_err(|_| format!("cannot parse {raw:?}"))
}

fn optional<T: FromStr>(raw: &str) -> std::result::Result<Option<T>, String> {
    match raw {
        "none" | "off" => Ok(None),
        _ => value(raw).map(Some),
    }
}

fn flag(raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {raw:?}")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// `origin` labels error messages, usually the file path.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::Config {
                origin: origin.to_string(),
                line: idx + 1,
                msg,
            };
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `section.key = value`, got {line:?}")))?;
            cfg.set(key.trim(), val.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
        let s = &mut self.synth;
        let m = &mut self.model;
        let o = &mut self.train;
        match key {
            "synth.frame_size" => s.frame_size = value(raw)?,
            "synth.frame_count" => s.frame_count = value(raw)?,
            "synth.tool_count" => s.tool_count = value(raw)?,
            "synth.texture_scale" => s.texture_scale = value(raw)?,
            "synth.tissue_radius" => s.tissue_radius = value(raw)?,
            "synth.tissue_deform" => s.tissue_deform = value(raw)?,
            "synth.tissue_tremor" => s.tissue_tremor = value(raw)?,
            "synth.tool_radius" => s.tool_radius = value(raw)?,
            "synth.trajectory_noise" => s.trajectory_noise = value(raw)?,
            "synth.jerk_floor" => s.jerk_floor = value(raw)?,
            "synth.jerk_ceil" => s.jerk_ceil = value(raw)?,
            "synth.noise_min" => s.noise_min = value(raw)?,
            "synth.noise_max" => s.noise_max = value(raw)?,
            "synth.trial_jitter" => s.trial_jitter = value(raw)?,
            "synth.n_users" => s.n_users = value(raw)?,
            "synth.trials_per_user" => s.trials_per_user = value(raw)?,
            "synth.task_id" => s.task_id = value(raw)?,
            "model.k" => m.k = value(raw)?,
            "model.channels" => m.channels = value(raw)?,
            "model.extractor_hidden" => m.extractor_hidden = value(raw)?,
            "model.group_mid" => m.group_mid = value(raw)?,
            "model.group_out" => m.group_out = value(raw)?,
            "model.hidden" => m.hidden = value(raw)?,
            "model.timesteps" => m.timesteps = value(raw)?,
            "model.snippet_len" => m.snippet_len = value(raw)?,
            "model.in_channels" => m.in_channels = value(raw)?,
            "model.variant" => {
                m.variant = Variant::from_name(raw).ok_or_else(|| format!("unknown variant {raw:?}"))?
            }
            "model.supervise_positions" => m.supervise_positions = flag(raw)?,
            "model.supervised_group" => m.supervised_group = value(raw)?,
            "model.target_radius" => m.target_radius = value(raw)?,
            "optimizer.initial_lr" => o.sgd.initial_lr = value(raw)?,
            "optimizer.decay_factor" => o.sgd.decay_factor = value(raw)?,
            "optimizer.decay_every_epochs" => o.sgd.decay_every_epochs = value(raw)?,
            "optimizer.batch_size" => o.sgd.batch_size = value(raw)?,
            "optimizer.epochs" => o.sgd.epochs = value(raw)?,
            "optimizer.momentum" => o.sgd.momentum = value(raw)?,
            "optimizer.clip_norm" => o.clip_norm = optional(raw)?,
            "optimizer.kmeans_init" => o.kmeans_init = flag(raw)?,
            "optimizer.head_init" => o.head_init = optional(raw)?,
            "optimizer.lambda_exist" => o.loss.lambda_exist = value(raw)?,
            "optimizer.lambda1" => o.loss.lambda1 = value(raw)?,
            "optimizer.lambda2" => o.loss.lambda2 = value(raw)?,
            "optimizer.alpha" => o.loss.existence.alpha = value(raw)?,
            "optimizer.beta" => o.loss.existence.beta = value(raw)?,
            "optimizer.epsilon" => o.loss.existence.epsilon = value(raw)?,
            "data.dir" => self.data.dir = Some(PathBuf::from(raw)),
            "data.scheme" => self.data.scheme = SplitKind::parse(raw).map_err(|e| e.to_string())?,
            "data.seed" => self.data.seed = value(raw)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.sgd.validate()?;
        self.train.loss.existence.validate()?;
        if let Some(l) = self.train.head_init {
            if !(l > 0.0 && l.is_finite()) {
                return Err(CliError::Precondition(format!("head_init must be > 0, got {l}")));
            }
        }
        if let Some(c) = self.train.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(CliError::Precondition(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Applies a `--seed` override and propagates the seed to the generator
    /// and the trainer.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.data.seed = seed;
        }
        self.synth.seed = self.data.seed;
        self.train.seed = self.data.seed;
        self
    }

    /// Canonical text form; parses back to an equal config.
    pub fn render(&self) -> String {
        let (s, m, o) = (&self.synth, &self.model, &self.train);
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("synth.frame_size", s.frame_size.to_string());
        put("synth.frame_count", s.frame_count.to_string());
        put("synth.tool_count", s.tool_count.to_string());
        put("synth.texture_scale", s.texture_scale.to_string());
        put("synth.tissue_radius", s.tissue_radius.to_string());
        put("synth.tissue_deform", s.tissue_deform.to_string());
        put("synth.tissue_tremor", s.tissue_tremor.to_string());
        put("synth.tool_radius", s.tool_radius.to_string());
        put("synth.trajectory_noise", s.trajectory_noise.to_string());
        put("synth.jerk_floor", s.jerk_floor.to_string());
        put("synth.jerk_ceil", s.jerk_ceil.to_string());
        put("synth.noise_min", s.noise_min.to_string());
        put("synth.noise_max", s.noise_max.to_string());
        put("synth.trial_jitter", s.trial_jitter.to_string());
        put("synth.n_users", s.n_users.to_string());
        put("synth.trials_per_user", s.trials_per_user.to_string());
        put("synth.task_id", s.task_id.to_string());
        put("model.k", m.k.to_string());
        put("model.channels", m.channels.to_string());
        put("model.extractor_hidden", m.extractor_hidden.to_string());
        put("model.group_mid", m.group_mid.to_string());
        put("model.group_out", m.group_out.to_string());
        put("model.hidden", m.hidden.to_string());
        put("model.timesteps", m.timesteps.to_string());
        put("model.snippet_len", m.snippet_len.to_string());
        put("model.in_channels", m.in_channels.to_string());
        put("model.variant", m.variant.name().to_string());
        put("model.supervise_positions", m.supervise_positions.to_string());
        put("model.supervised_group", m.supervised_group.to_string());
        put("model.target_radius", m.target_radius.to_string());
        put("optimizer.initial_lr", o.sgd.initial_lr.to_string());
        put("optimizer.decay_factor", o.sgd.decay_factor.to_string());
        put("optimizer.decay_every_epochs", o.sgd.decay_every_epochs.to_string());
        put("optimizer.batch_size", o.sgd.batch_size.to_string());
        put("optimizer.epochs", o.sgd.epochs.to_string());
        put("optimizer.momentum", o.sgd.momentum.to_string());
        put("optimizer.clip_norm", o.clip_norm.map_or("none".to_string(), |c| c.to_string()));
        put("optimizer.kmeans_init", o.kmeans_init.to_string());
        put("optimizer.head_init", o.head_init.map_or("none".to_string(), |c| c.to_string()));
        put("optimizer.lambda_exist", o.loss.lambda_exist.to_string());
        put("optimizer.lambda1", o.loss.lambda1.to_string());
        put("optimizer.lambda2", o.loss.lambda2.to_string());
        put("optimizer.alpha", o.loss.existence.alpha.to_string());
        put("optimizer.beta", o.loss.existence.beta.to_string());
        put("optimizer.epsilon", o.loss.existence.epsilon.to_string());
        if let Some(dir) = &self.data.dir {
            put("data.dir", dir.display().to_string());
        }
        put("data.scheme", self.data.scheme.name());
        put("data.seed", self.data.seed.to_string());
        out
    }
}
