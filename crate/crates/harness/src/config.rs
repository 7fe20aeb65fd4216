//! Experiment configuration file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ostta_core::adaptation::Hyperparams;
use ostta_core::metrics::AurocPooling;
use ostta_core::nn::{ArchSpec, TrainConfig};
use ostta_core::stream::StreamConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, IoContext, Result};
use crate::variant::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root directory for task files, checkpoint, run logs and reports.
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Variant>,
    pub arch: ArchConfig,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub hp: Hyperparams,
    pub eval: EvalConfig,
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub auroc_pooling: AurocPooling,
    /// Batches per point of the wrongly-filtered and H-score curves.
    pub curve_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { auroc_pooling: AurocPooling::PerDomain, curve_window: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Tau,
    Beta,
    Gamma,
    BatchSize,
    OpenRatio,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Tau => "tau",
            SweepAxis::Beta => "beta",
            SweepAxis::Gamma => "gamma",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::OpenRatio => "open_ratio",
        }
    }

    /// Whether a value on this axis changes the stream rather than the hyperparameters.
    pub fn touches_stream(self) -> bool {
        matches!(self, SweepAxis::BatchSize | SweepAxis::OpenRatio)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::Alpha,
            SweepAxis::Tau,
            SweepAxis::Beta,
            SweepAxis::Gamma,
            SweepAxis::BatchSize,
            SweepAxis::OpenRatio,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| HarnessError::Config(format!("unknown sweep axis '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2, 3, 4],
            methods: ["source", "tent", "adapt-filter", "ema-filter", "paf-kip"]
                .iter()
                .map(|s| s.parse().expect("built-in variant name"))
                .collect(),
            arch: ArchConfig::default(),
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
            hp: Hyperparams::default(),
            eval: EvalConfig::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Parse { msg, .. } => HarnessError::Parse { path: path.into(), msg },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| HarnessError::Parse { path: PathBuf::new(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(HarnessError::Config("methods must not be empty".into()));
        }
        if self.eval.curve_window == 0 {
            return Err(HarnessError::Config("eval.curve_window must be positive".into()));
        }
        self.stream.validate()?;
        self.arch_spec().validate()?;
        self.hp.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(HarnessError::Config("sweep.values must not be empty".into()));
            }
            for &v in &sweep.values {
                self.with_axis(sweep.axis, v)?;
            }
        }
        Ok(())
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec::new(self.stream.dim, self.arch.hidden.clone(), self.stream.num_classes)
    }

    /// A copy with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        match axis {
            SweepAxis::Alpha => cfg.hp.alpha = value,
            SweepAxis::Tau => cfg.hp.tau = Some(value),
            SweepAxis::Beta => cfg.hp.beta = value,
            SweepAxis::Gamma => cfg.hp.gamma = value,
            SweepAxis::BatchSize => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(HarnessError::Config(format!("batch_size {value} is not an integer ≥ 2")));
                }
                cfg.stream.batch_size = value as usize;
            }
            SweepAxis::OpenRatio => cfg.stream.open_ratio = value,
        }
        cfg.sweep = None;
        cfg.stream.validate()?;
        cfg.hp.validate()?;
        Ok(cfg)
    }

    /// Hash of every field that can change a result. The output directory is excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        digest(&canonical)
    }

    /// Hash of the fields shared by every run of one experiment: the stream,
    /// architecture, source training, base hyperparameters and evaluation
    /// settings. Runs with equal scenario hashes can be reported together.
    pub fn scenario_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.seeds.clear();
        canonical.methods.clear();
        canonical.sweep = None;
        digest(&canonical)
    }
}

fn digest(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(ExperimentConfig::parse("[hp]\nalhpa = 1.0\n").is_err());
    }

    #[test]
    fn empty_seeds_rejected() {
        assert!(ExperimentConfig::parse("seeds = []\n").is_err());
    }

    #[test]
    fn hash_tracks_meaningful_fields_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.hp.alpha = 1.5;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seeds = vec![9];
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.scenario_hash(), c.scenario_hash());
    }

    #[test]
    fn sweep_axes_apply() {
        let base = ExperimentConfig::default();
        assert_eq!(base.with_axis(SweepAxis::Alpha, 4.0).unwrap().hp.alpha, 4.0);
        assert_eq!(base.with_axis(SweepAxis::Tau, 0.5).unwrap().hp.tau, Some(0.5));
        assert_eq!(base.with_axis(SweepAxis::BatchSize, 50.0).unwrap().stream.batch_size, 50);
        assert!(base.with_axis(SweepAxis::BatchSize, 50.5).is_err());
        assert!(base.with_axis(SweepAxis::Beta, 1.5).is_err());
        assert_eq!("open_ratio".parse::<SweepAxis>().unwrap(), SweepAxis::OpenRatio);
    }
}
