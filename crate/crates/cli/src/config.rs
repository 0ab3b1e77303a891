use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bst_core::models::{ModelConfig, ModelKind};
use bst_core::synth::{schema_for, GenConfig, SchemaLayout};
use bst_core::train::{BenchOptions, TrainConfig};
use bst_core::FeatureSchema;
use serde::{Deserialize, Serialize};

/// Everything one run depends on. Loaded from a TOML file; missing
/// sections take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. Copied into the generator, model init and training.
    pub seed: u64,
    /// Number of consecutive seeds `compare` runs, starting at `seed`.
    pub seeds: u64,
    pub data_dir: Option<PathBuf>,
    pub gen: GenConfig,
    pub layout: SchemaLayout,
    /// Explicit schema. When absent it is derived from `gen` and `layout`.
    pub schema: Option<FeatureSchema>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 5,
            data_dir: None,
            gen: GenConfig::default(),
            layout: SchemaLayout::default(),
            schema: None,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward width; four times d_model when absent.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub mlp_hidden: [usize; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Bst,
            blocks: 1,
            heads: 2,
            d_ff: None,
            dropout: 0.1,
            leaky_slope: 0.01,
            mlp_hidden: [128, 64, 32],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub examples: usize,
    pub repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            examples: 250,
            repetitions: 4,
        }
    }
}

impl From<BenchSection> for BenchOptions {
    fn from(b: BenchSection) -> Self {
        BenchOptions {
            examples: b.examples,
            repetitions: b.repetitions,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies flag overrides and propagates the global seed.
    pub fn resolve(mut self, seed: Option<u64>, kind: Option<ModelKind>, blocks: Option<usize>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(k) = kind {
            self.model.kind = k;
        }
        if let Some(b) = blocks {
            self.model.blocks = b;
        }
        let seed = self.seed;
        self.with_seed(seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.gen.seed = seed;
        self.train.seed = seed;
        self.gen.validate()?;
        self.train.validate()?;
        if self.seeds == 0 {
            bail!("seeds must be at least 1");
        }
        Ok(self)
    }

    pub fn schema(&self) -> FeatureSchema {
        self.schema
            .clone()
            .unwrap_or_else(|| schema_for(&self.gen, &self.layout))
    }

    pub fn model_config(&self, kind: ModelKind, blocks: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::new(kind, self.schema(), m.heads);
        cfg.block.blocks = blocks;
        cfg.block.dropout = m.dropout;
        cfg.block.leaky_slope = m.leaky_slope;
        if let Some(d_ff) = m.d_ff {
            cfg.block.d_ff = d_ff;
        }
        cfg.mlp_hidden = m.mlp_hidden;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn selected_model(&self) -> Result<ModelConfig> {
        self.model_config(self.model.kind, self.model.blocks)
    }
}
