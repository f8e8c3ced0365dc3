//! Command configurations: file loading plus flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use psyq_core::ask::llm::LlmConfig;
use psyq_core::ask::prompt::DEFAULT_POST_BUDGET;
use psyq_core::data::Split;
use psyq_core::encode::{DEFAULT_HASH_DIM, DEFAULT_HASH_SEED};
use psyq_core::eval::{DropRule, Variant};
use psyq_core::moe::MoeConfig;
use psyq_core::train::TrainConfig;

/// Read a TOML or JSON config. `.json` files are JSON; anything else is
/// tried as TOML first and then as JSON.
pub fn load_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        return serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()));
    }
    match toml::from_str(&text) {
        Ok(v) => Ok(v),
        Err(toml_err) => serde_json::from_str(&text)
            .map_err(|_| toml_err)
            .with_context(|| format!("parsing config {}", path.display())),
    }
}

pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load_file)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Jsonl,
    Json,
}

impl From<DataFormat> for psyq_core::data::DatasetFormat {
    fn from(f: DataFormat) -> Self {
        match f {
            DataFormat::Jsonl => psyq_core::data::DatasetFormat::JsonLines,
            DataFormat::Json => psyq_core::data::DatasetFormat::JsonArray,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: PathBuf,
    pub format: DataFormat,
    pub questionnaire: PathBuf,
    pub answers: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: PathBuf::from("users.jsonl"),
            format: DataFormat::Jsonl,
            questionnaire: PathBuf::from("questionnaire.json"),
            answers: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    #[default]
    Hashing,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    /// Hashing width; ignored for precomputed tables.
    pub dim: usize,
    pub seed: u64,
    /// JSONL table of `{"key": ..., "vec": [...]}` rows.
    pub table: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            kind: EmbeddingKind::Hashing,
            dim: DEFAULT_HASH_DIM,
            seed: DEFAULT_HASH_SEED,
            table: None,
        }
    }
}

/// Settings of the multi-run commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub fractions: Vec<f64>,
    pub question_counts: Vec<usize>,
    pub expert_counts: Vec<usize>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            seeds: (0..5).collect(),
            variants: Variant::ALL.to_vec(),
            fractions: vec![0.4, 0.6, 0.8, 1.0],
            question_counts: vec![4, 8, 16, 32, 60],
            expert_counts: vec![1, 2, 4, 8, 16, 32],
        }
    }
}

/// Shared by `train`, `ablate` and the sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives weight initialisation and shuffling; overrides
    /// `moe.init_seed` and `train.seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub embedding: EmbeddingConfig,
    pub moe: MoeConfig,
    pub train: TrainConfig,
    /// Architecture or schedule variant for `train`.
    pub variant: Variant,
    /// Start from this checkpoint instead of fresh weights.
    pub resume_from: Option<PathBuf>,
    pub skip_stage1: bool,
    pub grid: ExperimentGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig {
                answers: Some(PathBuf::from("answers.jsonl")),
                ..Default::default()
            },
            embedding: EmbeddingConfig::default(),
            moe: MoeConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::Full,
            resume_from: None,
            skip_stage1: false,
            grid: ExperimentGrid::default(),
        }
    }
}

impl ExperimentConfig {
    /// Copy with every seed derived from `seed`.
    pub fn seeded(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.seed = seed;
        c.moe.init_seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn detect_seed(&self) -> u64 {
        self.seed.wrapping_add(0x00d3_7ec7)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.embedding.kind == EmbeddingKind::Hashing {
            if self.embedding.dim != self.moe.embed_dim {
                bail!(
                    "embedding.dim ({}) and moe.embed_dim ({}) differ",
                    self.embedding.dim,
                    self.moe.embed_dim
                );
            }
        } else if self.embedding.table.is_none() {
            bail!("precomputed embeddings need embedding.table");
        }
        if self.data.answers.is_none() {
            bail!("data.answers is required for training");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Synthetic,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AskConfig {
    pub data: DataConfig,
    pub backend: Backend,
    /// Latent profiles from `gen-synthetic` (synthetic backend).
    pub profiles: PathBuf,
    /// Samples per (user, item).
    pub samples: usize,
    pub seed: u64,
    /// Synthetic answer signal strength in [0, 1].
    pub informativeness: f64,
    pub item_informativeness: Option<Vec<f64>>,
    pub item_noise: Option<Vec<f64>>,
    /// Splits whose users are asked.
    pub splits: Vec<Split>,
    pub include_label: bool,
    pub template: Option<PathBuf>,
    pub post_budget: usize,
    pub retry_failed: bool,
    pub llm: LlmConfig,
}

impl Default for AskConfig {
    fn default() -> Self {
        AskConfig {
            data: DataConfig::default(),
            backend: Backend::Synthetic,
            profiles: PathBuf::from("profiles.jsonl"),
            samples: 5,
            seed: 0,
            informativeness: 0.8,
            item_informativeness: None,
            item_noise: None,
            splits: Split::ALL.to_vec(),
            include_label: false,
            template: None,
            post_budget: DEFAULT_POST_BUDGET,
            retry_failed: false,
            llm: LlmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Directory of a finished `train` run.
    pub train_run: PathBuf,
    /// Evaluate on another dataset file instead of the training one.
    pub dataset: Option<PathBuf>,
    pub split: Split,
    pub drop: Option<DropRule>,
    /// Seed of the random item drop.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train_run: PathBuf::from("runs/train"),
            dataset: None,
            split: Split::Test,
            drop: None,
            seed: 0,
        }
    }
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train, validation, test)")),
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: psyq_core::Error| e.to_string())
}

pub fn parse_drop(s: &str) -> Result<DropRule, String> {
    match s {
        "max" => Ok(DropRule::Max),
        "min" => Ok(DropRule::Min),
        "random" | "rand" => Ok(DropRule::Random),
        _ => Err(format!("unknown drop rule `{s}` (max, min, random)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_configs_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 3\nvariant = \"posts_only\"\n[moe]\nn_experts = 4\n[train.stage1]\nepochs = 2\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"seed":3,"variant":"posts_only","moe":{"n_experts":4},"train":{"stage1":{"epochs":2}}}"#).unwrap();
        let a: ExperimentConfig = load_file(&t).unwrap();
        let b: ExperimentConfig = load_file(&j).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.moe.n_experts, 4);
        assert_eq!(a.train.stage1.epochs, 2);
        assert_eq!(a.train.stage1.lr, 5e-4);
        assert_eq!(a.variant, Variant::PostsOnly);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "sed = 3\n").unwrap();
        assert!(load_file::<ExperimentConfig>(&t).is_err());
    }

    #[test]
    fn seeding_propagates() {
        let c = ExperimentConfig::default().seeded(9);
        assert_eq!((c.seed, c.moe.init_seed, c.train.seed), (9, 9, 9));
    }
}
