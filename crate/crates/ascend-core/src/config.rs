//! Run configuration: one JSON document drives every pipeline command.
//!
//! A config file only needs the fields it overrides; everything else comes
//! from the chosen preset ("desk" by default, "table1" for the paper-scale
//! profile). The effective config is logged next to each command's outputs
//! so any run can be replayed exactly.

use crate::events::Outcome;
use crate::finetune::FinetuneConfig;
use crate::metrics::TieHandling;
use crate::model::ModelConfig;
use crate::pretrain::{MaskPolicy, OptimizerConfig, PretrainOptions};
use crate::seqbuild::{OutcomeDefs, RefRange, SeqConfig};
use crate::synthcohort::CohortSpec;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Unreadable(PathBuf, std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("unknown preset {0:?} (expected \"desk\" or \"table1\")")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub mapping: PathBuf,
    pub events: PathBuf,
    pub patients: PathBuf,
    pub ground_truth: PathBuf,
    pub vocab: PathBuf,
    pub sequences: PathBuf,
    pub indices: PathBuf,
    pub pretrain_dir: PathBuf,
    pub finetune_dir: PathBuf,
    pub report_dir: PathBuf,
    pub neighbors: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            mapping: "data/mapping_176.tsv".into(),
            events: "out/events.csv".into(),
            patients: "out/patients.csv".into(),
            ground_truth: "out/ground_truth.json".into(),
            vocab: "out/vocab.json".into(),
            sequences: "out/sequences.jsonl".into(),
            indices: "out/indices.jsonl".into(),
            pretrain_dir: "out/pretrain".into(),
            finetune_dir: "out/finetune".into(),
            report_dir: "out/report".into(),
            neighbors: "out/neighbors.json".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 || self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(ConfigError::Invalid(format!("split fractions sum to {sum}")));
        }
        Ok(())
    }

    /// Deterministic patient-level assignment from the master seed.
    pub fn assign(&self, seed: u64, patient_id: &str) -> Split {
        let u = crate::rng::derive_u64(seed, "split", patient_id) as f64
            / (u64::MAX as f64 + 1.0);
        if u < self.train {
            Split::Train
        } else if u < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Training and generation commands require a seed.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub mask_policy: MaskPolicy,
    pub finetune: FinetuneConfig,
    pub sequence: SeqConfig,
    pub cohort: CohortSpec,
    /// Outcome definitions: outcome name -> qualifying phenotypes.
    pub outcomes: BTreeMap<String, BTreeSet<String>>,
    pub lab_ranges: BTreeMap<String, RefRange>,
    pub split: SplitConfig,
    pub pretrain_log_every: u64,
    pub pretrain_val_every: u64,
    pub pretrain_checkpoint_every: u64,
    pub pretrain_max_val_batches: usize,
    pub ties: TieHandling,
    pub horizon_days: f64,
    /// How many phenotypes the mapping file must define; checked at vocab
    /// build when set.
    pub expected_phenotypes: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// CPU-scale profile: a small encoder and short schedules that run the
    /// whole pipeline in minutes.
    pub fn desk() -> Self {
        let outcomes = crate::seqbuild::default_outcome_defs()
            .into_iter()
            .map(|(o, set)| (o.name().to_string(), set))
            .collect();
        let mut lab_ranges = BTreeMap::new();
        lab_ranges.insert("CREA".to_string(), RefRange { low: 0.6, high: 1.3, critical: 4.0 });
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: Some(42),
            paths: Paths::default(),
            model: ModelConfig::desk(0),
            optimizer: OptimizerConfig {
                lr_peak: 3e-4,
                warmup_steps: 100,
                total_steps: 500,
                batch_size: 16,
                ..OptimizerConfig::default()
            },
            mask_policy: MaskPolicy::default(),
            finetune: FinetuneConfig {
                lr: 2e-4,
                warmup_steps: 100,
                frozen_layers: 0,
                batch_size: 32,
                epochs: 10,
                early_stop_patience: 4,
                ..FinetuneConfig::default()
            },
            sequence: SeqConfig { max_len: 256, ..SeqConfig::default() },
            cohort: CohortSpec::default(),
            outcomes,
            lab_ranges,
            split: SplitConfig::default(),
            pretrain_log_every: 50,
            pretrain_val_every: 200,
            pretrain_checkpoint_every: 400,
            pretrain_max_val_batches: 8,
            ties: TieHandling::Literal,
            horizon_days: 365.0,
            expected_phenotypes: Some(176),
        }
    }

    /// The paper-scale profile; kept for reference runs, not CPU-friendly.
    pub fn table1() -> Self {
        RunConfig {
            model: ModelConfig::table1(0),
            optimizer: OptimizerConfig::default(),
            finetune: FinetuneConfig::default(),
            sequence: SeqConfig::default(),
            pretrain_log_every: 100,
            pretrain_val_every: 500,
            pretrain_checkpoint_every: 5000,
            ..RunConfig::desk()
        }
    }

    fn preset(name: &str) -> Result<RunConfig, ConfigError> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "table1" => Ok(RunConfig::table1()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Load a config file: choose the preset named by its `"preset"` field
    /// (default "desk"), then overlay every field the file specifies.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let bytes =
            std::fs::read(path).map_err(|e| ConfigError::Unreadable(path.to_path_buf(), e))?;
        let user: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse(e.to_string()))?;
        RunConfig::from_value(user)
    }

    pub fn from_value(user: serde_json::Value) -> Result<RunConfig, ConfigError> {
        let preset_name = user
            .get("preset")
            .and_then(|v| v.as_str())
            .unwrap_or("desk")
            .to_string();
        let base = RunConfig::preset(&preset_name)?;
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        let mut user = user;
        if let Some(obj) = user.as_object_mut() {
            obj.remove("preset");
        }
        deep_merge(&mut merged, user);
        let config: RunConfig =
            serde_json::from_value(merged).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion(config.schema_version));
        }
        config.split.validate()?;
        Ok(config)
    }

    /// The seed, or an error for commands that need one.
    pub fn require_seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or_else(|| ConfigError::Invalid("seed is required".into()))
    }

    /// Outcome definitions with parsed outcome names.
    pub fn outcome_defs(&self) -> Result<OutcomeDefs, ConfigError> {
        let mut defs = OutcomeDefs::new();
        for (name, set) in &self.outcomes {
            let outcome = match name.as_str() {
                "MI" => Outcome::Mi,
                "STROKE" => Outcome::Stroke,
                "MACE" => Outcome::Mace,
                "CV_DEATH" => Outcome::CvDeath,
                "ALL_DEATH" => Outcome::AllDeath,
                other => {
                    return Err(ConfigError::Invalid(format!("unknown outcome {other:?}")))
                }
            };
            defs.insert(outcome, set.clone());
        }
        for outcome in crate::events::OUTCOMES {
            if !defs.contains_key(&outcome) {
                return Err(ConfigError::Invalid(format!(
                    "outcome {} has no definition",
                    outcome.name()
                )));
            }
        }
        Ok(defs)
    }

    pub fn pretrain_options(&self, seed: u64) -> PretrainOptions {
        PretrainOptions {
            seed,
            log_every: self.pretrain_log_every,
            val_every: self.pretrain_val_every,
            checkpoint_every: self.pretrain_checkpoint_every,
            max_val_batches: self.pretrain_max_val_batches,
            target_train_top1: None,
        }
    }

    pub fn to_pretty_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serializes");
        bytes.push(b'\n');
        bytes
    }
}

/// Overlay `patch` onto `base`, object field by object field; arrays and
/// scalars replace wholesale.
fn deep_merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(base_map), serde_json::Value::Object(patch_map)) => {
            for (key, value) in patch_map {
                match base_map.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        base_map.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}
