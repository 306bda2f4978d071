//! The run configuration: one TOML document with a section per stage.
//! Command-line flags override fields; the effective document is written to
//! every run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pvdiag::corrupt::{CorruptionKind, SeverityTable};
use pvdiag::curate::{AugmentPlan, QuotaPolicy, SplitSpec};
use pvdiag::rl::{Method, TrainConfig};
use pvdiag::DefectClass;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime choose.
    pub jobs: usize,
    pub paths: PathsConfig,
    pub curate: CurateConfig,
    pub corrupt: CorruptConfig,
    pub tta: TtaConfig,
    pub eval: EvalConfig,
    pub rl: RlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 0,
            paths: PathsConfig::default(),
            curate: CurateConfig::default(),
            corrupt: CorruptConfig::default(),
            tta: TtaConfig::default(),
            eval: EvalConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub image_roots: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateConfig {
    pub label_map: Option<PathBuf>,
    pub quotas: Vec<QuotaPolicy>,
    pub augment_classes: Vec<DefectClass>,
    pub augment: AugmentPlan,
    /// `split.seed` is always replaced by the run seed.
    pub split: SplitSpec,
    pub assign_splits: bool,
}

impl Default for CurateConfig {
    fn default() -> Self {
        CurateConfig {
            label_map: None,
            quotas: Vec::new(),
            augment_classes: Vec::new(),
            augment: AugmentPlan::default(),
            split: SplitSpec::default(),
            assign_splits: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptConfig {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Only records in this split are corrupted; all when unset.
    pub split: Option<pvdiag::Split>,
    pub table: SeverityTable,
}

impl Default for CorruptConfig {
    fn default() -> Self {
        CorruptConfig { kind: CorruptionKind::GaussianNoise, severity: 1, split: None, table: SeverityTable::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    /// Per-view accuracy of the simulated predictor.
    pub oracle_accuracy: f64,
    pub split: Option<pvdiag::Split>,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig { oracle_accuracy: 0.8, split: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub plot: bool,
    pub plot_title: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { plot: false, plot_title: "Risk-coverage".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub method: Method,
    pub env: String,
    pub steps: usize,
    pub train: TrainConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig { method: Method::Rloo, env: "bandit2".into(), steps: 500, train: TrainConfig::default() }
    }
}

pub const TOY_ENVS: [&str; 3] = ["bandit2", "bandit3", "chain"];

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config("ConfigRead", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config("ConfigParse", format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every section so no stage starts on a bad document.
    pub fn validate(&self) -> CliResult<()> {
        let mut seen = BTreeMap::new();
        for q in &self.curate.quotas {
            q.validate()?;
            if seen.insert(q.class, ()).is_some() {
                return Err(CliError::config("DuplicateQuota", format!("two quotas for class `{}`", q.class)));
            }
        }
        self.curate.augment.validate()?;
        self.curate.split.validate()?;
        self.corrupt.table.validate()?;
        pvdiag::corrupt::CorruptionSpec::new(self.corrupt.kind, self.corrupt.severity, self.seed)?;
        if !(0.0..=1.0).contains(&self.tta.oracle_accuracy) {
            return Err(CliError::config("InvalidAccuracy", format!("oracle_accuracy {} outside [0, 1]", self.tta.oracle_accuracy)));
        }
        if !TOY_ENVS.contains(&self.rl.env.as_str()) {
            return Err(CliError::config("UnknownEnv", format!("env `{}` not one of {TOY_ENVS:?}", self.rl.env)));
        }
        self.rl.train.validate()?;
        Ok(())
    }
}
