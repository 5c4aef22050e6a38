use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::privacy::{ClipMode, DpConfig};
use crate::tasks::SPLIT_MNIST_PAIRS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodKind {
    Vger,
    DpVgerPublic { epsilon: f64, delta: f64 },
    DpVgerNoPublic { epsilon: f64, delta: f64 },
    CoresetOnly,
    Vcl,
    PlainSgd,
}

impl MethodKind {
    pub const NAMES: [&'static str; 6] = ["vger", "dp-vger-public", "dp-vger-nopublic", "coreset-only", "vcl", "plain-sgd"];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Vger => "vger",
            MethodKind::DpVgerPublic { .. } => "dp-vger-public",
            MethodKind::DpVgerNoPublic { .. } => "dp-vger-nopublic",
            MethodKind::CoresetOnly => "coreset-only",
            MethodKind::Vcl => "vcl",
            MethodKind::PlainSgd => "plain-sgd",
        }
    }

    /// `(ε, δ)` per class GAN for the private variants.
    pub fn budget(&self) -> Option<(f64, f64)> {
        match *self {
            MethodKind::DpVgerPublic { epsilon, delta } | MethodKind::DpVgerNoPublic { epsilon, delta } => {
                Some((epsilon, delta))
            }
            _ => None,
        }
    }

    pub fn with_budget(self, epsilon: f64, delta: f64) -> Self {
        match self {
            MethodKind::DpVgerPublic { .. } => MethodKind::DpVgerPublic { epsilon, delta },
            MethodKind::DpVgerNoPublic { .. } => MethodKind::DpVgerNoPublic { epsilon, delta },
            m => m,
        }
    }

    pub fn uses_gan(&self) -> bool {
        matches!(
            self,
            MethodKind::Vger | MethodKind::DpVgerPublic { .. } | MethodKind::DpVgerNoPublic { .. }
        )
    }

    /// Whether a public slice is carved from each task's training rows.
    pub fn uses_public(&self) -> bool {
        matches!(self, MethodKind::DpVgerPublic { .. } | MethodKind::CoresetOnly)
    }

    /// Identifier used in CSV files; never contains a comma.
    pub fn label(&self) -> String {
        match self.budget() {
            Some((e, d)) => format!("{}-eps{e}-delta{d:e}", self.name()),
            None => self.name().to_string(),
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses a method name; private variants get their default budgets
/// `(1, 1e-8)` with public data and `(5, 1e-4)` without.
impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vger" => MethodKind::Vger,
            "dp-vger-public" => MethodKind::DpVgerPublic {
                epsilon: 1.0,
                delta: 1e-8,
            },
            "dp-vger-nopublic" => MethodKind::DpVgerNoPublic {
                epsilon: 5.0,
                delta: 1e-4,
            },
            "coreset-only" => MethodKind::CoresetOnly,
            "vcl" => MethodKind::Vcl,
            "plain-sgd" => MethodKind::PlainSgd,
            _ => {
                return Err(Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

/// Everything that determines a run. Parsed from and echoed as flat
/// `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: MethodKind,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub scale_factor: usize,
    /// Training rows kept per digit; 0 keeps all.
    pub per_class_cap: usize,
    /// Test rows kept per digit; 0 keeps all.
    pub test_per_class_cap: usize,
    pub public_fraction: f64,
    pub task_pairs: Vec<Vec<usize>>,
    pub bnn_hidden: Vec<usize>,
    pub bnn_epochs: usize,
    pub bnn_batch: usize,
    pub bnn_lr: f64,
    pub bnn_train_samples: usize,
    pub bnn_eval_samples: usize,
    pub sgd_epochs: usize,
    pub sgd_lr: f64,
    pub gan_latent: usize,
    pub gan_gen_hidden: Vec<usize>,
    pub gan_disc_hidden: Vec<usize>,
    pub gan_lr: f64,
    pub gan_batch: usize,
    pub gan_epochs: usize,
    pub gan_pretrain_epochs: usize,
    pub gan_init_scale: f64,
    pub gan_diversity: f64,
    pub gan_instance_noise: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Vger,
            seed: 0,
            data_dir: PathBuf::from("data/mnist"),
            scale_factor: 2,
            per_class_cap: 1000,
            test_per_class_cap: 500,
            public_fraction: 0.01,
            task_pairs: SPLIT_MNIST_PAIRS.iter().map(|&(a, b)| vec![a, b]).collect(),
            bnn_hidden: vec![100],
            bnn_epochs: 5,
            bnn_batch: 64,
            bnn_lr: 1e-3,
            bnn_train_samples: 1,
            bnn_eval_samples: 4,
            sgd_epochs: 5,
            sgd_lr: 1e-3,
            gan_latent: 32,
            gan_gen_hidden: vec![128],
            gan_disc_hidden: vec![64],
            gan_lr: 2e-4,
            gan_batch: 64,
            gan_epochs: 50,
            gan_pretrain_epochs: 300,
            gan_init_scale: 0.3,
            gan_diversity: 200.0,
            gan_instance_noise: 0.5,
            clip_norm: 1.0,
            clip_mode: ClipMode::Global,
            save_checkpoints: true,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Like [`Self::parse`], with `overrides` replacing any same-named keys of `text`.
    pub fn parse_with_overrides(text: &str, overrides: &[(&str, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            if overrides.iter().all(|(k, _)| *k != key) {
                pairs.push((format!("line {}", lineno + 1), key.to_string(), value.to_string()));
            }
        }
        for (k, v) in overrides {
            pairs.push((format!("override {k}"), k.to_string(), v.clone()));
        }
        let mut cfg = Self::default();
        let mut budget: (Option<f64>, Option<f64>) = (None, None);
        for (place, key, value) in &pairs {
            let r = match key.as_str() {
                "dp_epsilon" => parse_num(key, value).map(|v| budget.0 = Some(v)),
                "dp_delta" => parse_num(key, value).map(|v| budget.1 = Some(v)),
                _ => cfg.set(key, value),
            };
            r.map_err(|e| Error::Config(format!("{place}: {e}")))?;
        }
        if let Some((e0, d0)) = cfg.method.budget() {
            cfg.method = cfg.method.with_budget(budget.0.unwrap_or(e0), budget.1.unwrap_or(d0));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse_num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "scale_factor" => self.scale_factor = parse_num(key, v)?,
            "per_class_cap" => self.per_class_cap = parse_num(key, v)?,
            "test_per_class_cap" => self.test_per_class_cap = parse_num(key, v)?,
            "public_fraction" => self.public_fraction = parse_num(key, v)?,
            "task_pairs" => {
                self.task_pairs = v
                    .split(',')
                    .map(|g| g.trim().split('-').map(|c| parse_num(key, c.trim())).collect())
                    .collect::<Result<_>>()?
            }
            "bnn_hidden" => self.bnn_hidden = parse_list(key, v)?,
            "bnn_epochs" => self.bnn_epochs = parse_num(key, v)?,
            "bnn_batch" => self.bnn_batch = parse_num(key, v)?,
            "bnn_lr" => self.bnn_lr = parse_num(key, v)?,
            "bnn_train_samples" => self.bnn_train_samples = parse_num(key, v)?,
            "bnn_eval_samples" => self.bnn_eval_samples = parse_num(key, v)?,
            "sgd_epochs" => self.sgd_epochs = parse_num(key, v)?,
            "sgd_lr" => self.sgd_lr = parse_num(key, v)?,
            "gan_latent" => self.gan_latent = parse_num(key, v)?,
            "gan_gen_hidden" => self.gan_gen_hidden = parse_list(key, v)?,
            "gan_disc_hidden" => self.gan_disc_hidden = parse_list(key, v)?,
            "gan_lr" => self.gan_lr = parse_num(key, v)?,
            "gan_batch" => self.gan_batch = parse_num(key, v)?,
            "gan_epochs" => self.gan_epochs = parse_num(key, v)?,
            "gan_pretrain_epochs" => self.gan_pretrain_epochs = parse_num(key, v)?,
            "gan_init_scale" => self.gan_init_scale = parse_num(key, v)?,
            "gan_diversity" => self.gan_diversity = parse_num(key, v)?,
            "gan_instance_noise" => self.gan_instance_noise = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "clip_mode" => self.clip_mode = v.parse()?,
            "save_checkpoints" => self.save_checkpoints = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.task_pairs.is_empty() || self.task_pairs.iter().any(Vec::is_empty) {
            return bad("task_pairs must list at least one non-empty task".into());
        }
        if let Some(c) = self.task_pairs.iter().flatten().find(|&&c| c >= crate::bnn::NUM_CLASSES) {
            return bad(format!("task_pairs: class {c} is not a digit"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(c) = self.task_pairs.iter().flatten().find(|&&c| !seen.insert(c)) {
            return bad(format!("task_pairs: class {c} appears in more than one task"));
        }
        if self.scale_factor == 0 || 28 % self.scale_factor != 0 {
            return bad(format!("scale_factor must divide 28, got {}", self.scale_factor));
        }
        if !(0.0..1.0).contains(&self.public_fraction) {
            return bad(format!("public_fraction must be in [0, 1), got {}", self.public_fraction));
        }
        if self.bnn_batch == 0 || self.bnn_train_samples == 0 || self.bnn_eval_samples == 0 {
            return bad("bnn batch and sample counts must be positive".into());
        }
        for (k, lr) in [("bnn_lr", self.bnn_lr), ("sgd_lr", self.sgd_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{k} must be > 0"));
            }
        }
        if self.bnn_hidden.contains(&0) {
            return bad("bnn_hidden widths must be positive".into());
        }
        if self.method.uses_gan() {
            self.gan_config(1).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some((epsilon, delta)) = self.method.budget() {
            if !(epsilon > 0.0 && epsilon.is_finite()) || !(delta > 0.0 && delta < 1.0) {
                return bad(format!("invalid budget ({epsilon}, {delta})"));
            }
            if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
                return bad(format!("clip_norm must be finite and > 0, got {}", self.clip_norm));
            }
        }
        if matches!(self.method, MethodKind::DpVgerPublic { .. } | MethodKind::CoresetOnly) && self.public_fraction == 0.0 {
            return bad(format!("{} needs public_fraction > 0", self.method.name()));
        }
        Ok(())
    }

    pub fn image_width(&self) -> usize {
        let side = 28 / self.scale_factor;
        side * side
    }

    pub fn gan_config(&self, image_width: usize) -> GanConfig {
        GanConfig {
            latent_dim: self.gan_latent,
            gen_hidden: self.gan_gen_hidden.clone(),
            disc_hidden: self.gan_disc_hidden.clone(),
            image_width,
            lr: self.gan_lr,
            batch_size: self.gan_batch,
            epochs: self.gan_epochs,
            pretrain_epochs: self.gan_pretrain_epochs,
            output_init_scale: self.gan_init_scale,
            diversity_weight: self.gan_diversity,
            instance_noise: self.gan_instance_noise,
        }
    }

    /// DP settings for one class GAN with sampling rate `q` and calibrated `σ`.
    pub fn dp_config(&self, q: f64, sigma: f64) -> Option<DpConfig> {
        self.method.budget().map(|(target_epsilon, delta)| DpConfig {
            clip_norm: self.clip_norm,
            noise_multiplier: sigma,
            sample_rate: q,
            target_epsilon,
            delta,
            clip_mode: self.clip_mode,
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("method", self.method.name().into());
        if let Some((e, d)) = self.method.budget() {
            kv("dp_epsilon", e.to_string());
            kv("dp_delta", format!("{d:e}"));
        }
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("scale_factor", self.scale_factor.to_string());
        kv("per_class_cap", self.per_class_cap.to_string());
        kv("test_per_class_cap", self.test_per_class_cap.to_string());
        kv("public_fraction", self.public_fraction.to_string());
        kv("task_pairs", self.task_pairs.iter().map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join("-")).collect::<Vec<_>>().join(","));
        kv("bnn_hidden", list(&self.bnn_hidden));
        kv("bnn_epochs", self.bnn_epochs.to_string());
        kv("bnn_batch", self.bnn_batch.to_string());
        kv("bnn_lr", self.bnn_lr.to_string());
        kv("bnn_train_samples", self.bnn_train_samples.to_string());
        kv("bnn_eval_samples", self.bnn_eval_samples.to_string());
        kv("sgd_epochs", self.sgd_epochs.to_string());
        kv("sgd_lr", self.sgd_lr.to_string());
        kv("gan_latent", self.gan_latent.to_string());
        kv("gan_gen_hidden", list(&self.gan_gen_hidden));
        kv("gan_disc_hidden", list(&self.gan_disc_hidden));
        kv("gan_lr", self.gan_lr.to_string());
        kv("gan_batch", self.gan_batch.to_string());
        kv("gan_epochs", self.gan_epochs.to_string());
        kv("gan_pretrain_epochs", self.gan_pretrain_epochs.to_string());
        kv("gan_init_scale", self.gan_init_scale.to_string());
        kv("gan_diversity", self.gan_diversity.to_string());
        kv("gan_instance_noise", self.gan_instance_noise.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("clip_mode", self.clip_mode.to_string());
        kv("save_checkpoints", self.save_checkpoints.to_string());
        s
    }
}
