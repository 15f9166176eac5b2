//! Run configuration: `section.key = value` lines, `#` comments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hemoforge_core::augment::{AugmentConfig, TtaMode};
use hemoforge_core::denoise::DenoiseConfig;
use hemoforge_core::infer::Averaging;
use hemoforge_core::model::train::TrainConfig;
use hemoforge_core::model::{descriptor, HeadSpec, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config key `{}`: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbones: Vec<String>,
    pub head_dims: [usize; 4],
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbones: vec![
                "swinv2-tiny".into(),
                "convnextv2-tiny".into(),
                "dinobloom-small".into(),
            ],
            head_dims: HeadSpec::default().hidden_dims,
            dropout: HeadSpec::default().dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub tta_k: usize,
    pub tta_mode: TtaMode,
    pub use_ema: bool,
    pub averaging: Averaging,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            tta_k: 8,
            tta_mode: TtaMode::Dihedral,
            use_ema: true,
            averaging: Averaging::Logits,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: Option<PathBuf>,
    pub jobs: usize,
    pub folds: usize,
    pub denoise: DenoiseConfig,
    pub sampler_beta: f64,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub ensemble: EnsembleConfig,
    /// `ensemble`, `all`, or an architecture id.
    pub eval_group: String,
    pub cl_cutoff: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: None,
            jobs: 1,
            folds: 3,
            denoise: DenoiseConfig::default(),
            sampler_beta: 0.9999,
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            ensemble: EnsembleConfig::default(),
            eval_group: "ensemble".into(),
            cl_cutoff: Some(hemoforge_core::cl::DEFAULT_SELF_CONFIDENCE_CUTOFF),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| err(key, format!("expected a {}, got `{v}`", type_name::<T>())))
}

fn type_name<T>() -> &'static str {
    let full = std::any::type_name::<T>();
    match full {
        "f64" => "number",
        "bool" => "boolean (true/false)",
        _ if full.starts_with('u') => "non-negative integer",
        _ => full,
    }
}

fn pair<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T), ConfigError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((num(key, a)?, num(key, b)?)),
        _ => Err(err(key, format!("expected `low, high`, got `{v}`"))),
    }
}

fn fmt_pair<T: fmt::Display>((a, b): (T, T)) -> String {
    format!("{a}, {b}")
}

fn tta_mode_str(m: TtaMode) -> &'static str {
    match m {
        TtaMode::Dihedral => "dihedral",
        TtaMode::RandomRotation => "random_rotation",
    }
}

fn averaging_str(a: Averaging) -> &'static str {
    match a {
        Averaging::Logits => "logits",
        Averaging::Probabilities => "probabilities",
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        let t = &self.train;
        let d = &self.denoise;
        vec![
            ("run.seed", self.seed.to_string()),
            (
                "run.dir",
                self.run_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("run.jobs", self.jobs.to_string()),
            ("data.folds", self.folds.to_string()),
            ("denoise.bypass_threshold", d.bypass_threshold.to_string()),
            ("denoise.h_factor", d.h_factor.to_string()),
            ("denoise.patch_size", d.patch_size.to_string()),
            ("denoise.max_patch_distance", d.max_patch_distance.to_string()),
            ("sampler.beta", self.sampler_beta.to_string()),
            ("augment.hflip_prob", a.hflip_prob.to_string()),
            ("augment.vflip_prob", a.vflip_prob.to_string()),
            ("augment.rotate_prob", a.rotate_prob.to_string()),
            ("augment.rotate_degrees", fmt_pair(a.rotate_degrees)),
            ("augment.noise_prob", a.noise_prob.to_string()),
            ("augment.noise_sigma", fmt_pair(a.noise_sigma)),
            ("augment.blur_prob", a.blur_prob.to_string()),
            ("augment.blur_sigma", fmt_pair(a.blur_sigma)),
            ("augment.motion_blur_prob", a.motion_blur_prob.to_string()),
            ("augment.motion_blur_length", fmt_pair(a.motion_blur_length)),
            ("augment.color_prob", a.color_prob.to_string()),
            ("augment.brightness", fmt_pair(a.brightness)),
            ("augment.contrast", fmt_pair(a.contrast)),
            ("augment.mix_prob", a.mix_prob.to_string()),
            ("augment.mix_alpha", a.mix_alpha.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_max", t.lr_max.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.adam_beta1", t.adam_beta1.to_string()),
            ("train.adam_beta2", t.adam_beta2.to_string()),
            ("train.ema_decay", t.ema_decay.to_string()),
            ("train.patience_epochs", t.patience_epochs.to_string()),
            ("train.focal_alpha", t.focal_alpha.to_string()),
            ("train.focal_gamma", t.focal_gamma.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("model.backbones", self.model.backbones.join(", ")),
            (
                "model.head_dims",
                self.model.head_dims.map(|d| d.to_string()).join(", "),
            ),
            ("model.dropout", self.model.dropout.to_string()),
            ("ensemble.tta_k", self.ensemble.tta_k.to_string()),
            ("ensemble.tta_mode", tta_mode_str(self.ensemble.tta_mode).into()),
            ("ensemble.use_ema", self.ensemble.use_ema.to_string()),
            ("ensemble.averaging", averaging_str(self.ensemble.averaging).into()),
            ("eval.group", self.eval_group.clone()),
            (
                "cl.self_confidence_cutoff",
                self.cl_cutoff.map_or("none".into(), |c| c.to_string()),
            ),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let a = &mut self.augment;
        let t = &mut self.train;
        let d = &mut self.denoise;
        match key {
            "run.seed" => self.seed = num(key, v)?,
            "run.dir" => self.run_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "run.jobs" => self.jobs = num(key, v)?,
            "data.folds" => self.folds = num(key, v)?,
            "denoise.bypass_threshold" => d.bypass_threshold = num(key, v)?,
            "denoise.h_factor" => d.h_factor = num(key, v)?,
            "denoise.patch_size" => d.patch_size = num(key, v)?,
            "denoise.max_patch_distance" => d.max_patch_distance = num(key, v)?,
            "sampler.beta" => self.sampler_beta = num(key, v)?,
            "augment.hflip_prob" => a.hflip_prob = num(key, v)?,
            "augment.vflip_prob" => a.vflip_prob = num(key, v)?,
            "augment.rotate_prob" => a.rotate_prob = num(key, v)?,
            "augment.rotate_degrees" => a.rotate_degrees = pair(key, v)?,
            "augment.noise_prob" => a.noise_prob = num(key, v)?,
            "augment.noise_sigma" => a.noise_sigma = pair(key, v)?,
            "augment.blur_prob" => a.blur_prob = num(key, v)?,
            "augment.blur_sigma" => a.blur_sigma = pair(key, v)?,
            "augment.motion_blur_prob" => a.motion_blur_prob = num(key, v)?,
            "augment.motion_blur_length" => a.motion_blur_length = pair(key, v)?,
            "augment.color_prob" => a.color_prob = num(key, v)?,
            "augment.brightness" => a.brightness = pair(key, v)?,
            "augment.contrast" => a.contrast = pair(key, v)?,
            "augment.mix_prob" => a.mix_prob = num(key, v)?,
            "augment.mix_alpha" => a.mix_alpha = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr_max" => t.lr_max = num(key, v)?,
            "train.lr_min" => t.lr_min = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.adam_beta1" => t.adam_beta1 = num(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = num(key, v)?,
            "train.ema_decay" => t.ema_decay = num(key, v)?,
            "train.patience_epochs" => t.patience_epochs = num(key, v)?,
            "train.focal_alpha" => t.focal_alpha = num(key, v)?,
            "train.focal_gamma" => t.focal_gamma = num(key, v)?,
            "train.max_epochs" => t.max_epochs = num(key, v)?,
            "model.backbones" => {
                self.model.backbones = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "model.head_dims" => {
                let dims: Vec<usize> = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_, _>>()?;
                self.model.head_dims = dims
                    .try_into()
                    .map_err(|_| err(key, "expected four comma-separated widths"))?;
            }
            "model.dropout" => self.model.dropout = num(key, v)?,
            "ensemble.tta_k" => self.ensemble.tta_k = num(key, v)?,
            "ensemble.tta_mode" => {
                self.ensemble.tta_mode = match v {
                    "dihedral" => TtaMode::Dihedral,
                    "random_rotation" => TtaMode::RandomRotation,
                    _ => return Err(err(key, "expected `dihedral` or `random_rotation`")),
                }
            }
            "ensemble.use_ema" => self.ensemble.use_ema = num(key, v)?,
            "ensemble.averaging" => {
                self.ensemble.averaging = match v {
                    "logits" => Averaging::Logits,
                    "probabilities" => Averaging::Probabilities,
                    _ => return Err(err(key, "expected `logits` or `probabilities`")),
                }
            }
            "eval.group" => self.eval_group = v.to_string(),
            "cl.self_confidence_cutoff" => {
                self.cl_cutoff = if v == "none" { None } else { Some(num(key, v)?) }
            }
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Constraint checks; module-level messages already carry the key name.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let from_module = |e: hemoforge_core::Error| {
            let msg = match e {
                hemoforge_core::Error::InvalidArgument(m) => m,
                other => other.to_string(),
            };
            let key = self
                .entries()
                .into_iter()
                .map(|(k, _)| k)
                .filter(|k| msg.contains(k))
                .max_by_key(|k| k.len())
                .unwrap_or("")
                .to_string();
            ConfigError { key, message: msg }
        };
        if !(0.0..1.0).contains(&self.sampler_beta) {
            return Err(err("sampler.beta", format!("must lie in [0, 1), got {}", self.sampler_beta)));
        }
        if self.folds < 2 {
            return Err(err("data.folds", "must be at least 2"));
        }
        if self.jobs == 0 {
            return Err(err("run.jobs", "must be at least 1"));
        }
        if self.ensemble.tta_k == 0 {
            return Err(err("ensemble.tta_k", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(err("model.dropout", "must lie in [0, 1)"));
        }
        if self.model.head_dims.contains(&0) {
            return Err(err("model.head_dims", "widths must be positive"));
        }
        if self.model.backbones.is_empty() {
            return Err(err("model.backbones", "needs at least one backbone"));
        }
        for b in &self.model.backbones {
            descriptor(b).map_err(|e| err("model.backbones", e.to_string()))?;
        }
        if let Some(c) = self.cl_cutoff {
            if !(0.0..=1.0).contains(&c) {
                return Err(err("cl.self_confidence_cutoff", "must lie in [0, 1] or be `none`"));
            }
        }
        if self.eval_group != "ensemble"
            && self.eval_group != "all"
            && !self.model.backbones.contains(&self.eval_group)
        {
            return Err(err(
                "eval.group",
                "expected `ensemble`, `all`, or one of model.backbones",
            ));
        }
        self.denoise.validate().map_err(from_module)?;
        self.augment.validate().map_err(from_module)?;
        self.train.validate().map_err(from_module)?;
        Ok(())
    }

    pub fn model_specs(&self) -> Result<Vec<ModelSpec>, ConfigError> {
        let head = HeadSpec {
            hidden_dims: self.model.head_dims,
            dropout_rate: self.model.dropout,
            ..HeadSpec::default()
        };
        self.model
            .backbones
            .iter()
            .map(|b| ModelSpec::for_backbone(b, head.clone()).map_err(|e| err("model.backbones", e.to_string())))
            .collect()
    }

    /// The training config with the global seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

/// Parses `key = value` overrides, as given to `--set`.
pub fn parse_override(text: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| err(text.trim(), "expected `section.key=value`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Applies the file text, then each override in order, then validates.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError {
            key: String::new(),
            message: format!("line {}: expected `section.key = value`", n + 1),
        })?;
        cfg.set(k.trim(), v)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (when given) and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| err("", format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}
