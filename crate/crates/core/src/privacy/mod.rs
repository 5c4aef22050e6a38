//! Differential privacy: the clipped Gaussian mechanism and its accountant.

pub mod accountant;
pub mod ledger;
pub mod mechanism;

use std::fmt::{self, Write as _};
use std::str::FromStr;

pub use accountant::{
    calibrate_sigma, compose, default_orders, epsilon_for, rdp_subsampled_gaussian, step_curve,
    to_eps_delta, RdpCurve,
};
pub use ledger::{DomainTag, LedgerBook, LedgerEntry, PrivacyLedger};
pub use mechanism::{clip, privatize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipMode {
    /// One ℓ₂ bound on the whole per-example gradient.
    #[default]
    Global,
    /// Each layer's block bounded by `C/√L`.
    PerLayer,
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipMode::Global => "global-l2",
            ClipMode::PerLayer => "per-layer-l2",
        })
    }
}

impl FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" | "global-l2" => Ok(ClipMode::Global),
            "per-layer" | "per-layer-l2" => Ok(ClipMode::PerLayer),
            _ => Err(Error::Config(format!("unknown clip mode {s:?}"))),
        }
    }
}

/// Mechanism and budget settings for one private training run.
#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    /// Per-example ℓ₂ bound `C`.
    pub clip_norm: f64,
    /// Noise std is `noise_multiplier · C`.
    pub noise_multiplier: f64,
    /// Batch size over private dataset size.
    pub sample_rate: f64,
    pub target_epsilon: f64,
    pub delta: f64,
    pub clip_mode: ClipMode,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) || self.noise_multiplier.is_infinite() {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be finite and ≥ 0, got {}",
                self.noise_multiplier
            )));
        }
        if self.noise_multiplier > 0.0 && self.clip_norm.is_infinite() {
            return Err(Error::InvalidArgument("noise needs a finite clip norm".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("sample rate must be in (0, 1], got {}", self.sample_rate)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.target_epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("target epsilon must be > 0, got {}", self.target_epsilon)));
        }
        Ok(())
    }
}

/// Accounting summary for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub domain: DomainTag,
    pub q: f64,
    pub sigma: f64,
    pub clip_norm: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub order: u32,
    pub clip_mode: ClipMode,
    pub target_epsilon: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrivacyReport {
    pub entries: Vec<ReportEntry>,
}

impl PrivacyReport {
    /// Summarizes one domain's ledger; `q` and `σ` are taken from its last entry.
    pub fn entry_for(ledger: &PrivacyLedger, dp: &DpConfig) -> Result<ReportEntry> {
        let curve = compose(ledger, &default_orders())?;
        let (epsilon, order) = to_eps_delta(&curve, dp.delta)?;
        let last = ledger.entries().last();
        Ok(ReportEntry {
            domain: ledger.domain(),
            q: last.map_or(dp.sample_rate, |e| e.q),
            sigma: last.map_or(dp.noise_multiplier, |e| e.sigma),
            clip_norm: dp.clip_norm,
            steps: ledger.steps(),
            delta: dp.delta,
            epsilon,
            order,
            clip_mode: dp.clip_mode,
            target_epsilon: dp.target_epsilon,
        })
    }

    pub fn push(&mut self, entry: ReportEntry) {
        self.entries.push(entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_epsilon(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.epsilon).reduce(f64::max)
    }

    /// Text block per domain, preceded by the accounting assumptions.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# privacy report: one (epsilon, delta) per class generative model\n");
        s.push_str("# adjacency: add/remove one example; domains are disjoint (parallel composition)\n");
        s.push_str("# accounting: integer-order RDP of the subsampled Gaussian, batches treated as Poisson-sampled with rate q although they are drawn by shuffling\n");
        s.push_str("# clipping: flat per-example l2 clipping (no grouped bounds from public gradient statistics)\n");
        s.push_str("# public-data pretraining is not charged to the budget\n");
        if self.entries.is_empty() {
            s.push_str("# no private mechanism was run\n");
        }
        for e in &self.entries {
            let _ = writeln!(s, "\n[{}]", e.domain);
            let _ = writeln!(s, "q = {}", e.q);
            let _ = writeln!(s, "sigma = {}", e.sigma);
            let _ = writeln!(s, "C = {}", e.clip_norm);
            let _ = writeln!(s, "steps = {}", e.steps);
            let _ = writeln!(s, "delta = {:e}", e.delta);
            let _ = writeln!(s, "epsilon = {}", e.epsilon);
            let _ = writeln!(s, "target_epsilon = {}", e.target_epsilon);
            let _ = writeln!(s, "argmin_alpha = {}", e.order);
            let _ = writeln!(s, "clipping = {}", e.clip_mode);
        }
        s
    }
}
