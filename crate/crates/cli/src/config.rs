//! Run configuration. The file is flat TOML with dotted keys
//! (`train.batch_size = 24`, `loss.kind = "dice"`); every key is optional
//! and an empty file gives the default protocol.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seaice_core::evaluator::{InferenceMode, DEFAULT_MEMORY_BUDGET, DEFAULT_TILE, TILE_OVERLAP};
use seaice_core::patch_sampler::{DEFAULT_PATCHES_PER_SCENE, DEFAULT_PATCH_SIZE};
use seaice_core::trainer::Optimizer;
use seaice_core::{LossSpec, ModelConfig, TrainingConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr_init: f64,
    pub lr_factor: f64,
    pub lr_patience_epochs: usize,
    pub lr_min: f64,
    pub early_stop_patience_epochs: usize,
    pub seeds: Vec<u64>,
    pub max_epochs: usize,
    pub val_tile: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            lr_init: t.lr_init,
            lr_factor: t.lr_factor,
            lr_patience_epochs: t.lr_patience_epochs,
            lr_min: t.lr_min,
            early_stop_patience_epochs: t.early_stop_patience_epochs,
            seeds: t.seeds,
            max_epochs: t.max_epochs,
            val_tile: t.val_tile,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Raw scenes and charts (`prepare` input).
    pub raw: PathBuf,
    /// Output of `prepare`.
    pub prepared: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            raw: PathBuf::from("data/raw"),
            prepared: PathBuf::from("data/prepared"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Manifest to train from; defaults to `split.json` in the prepared directory.
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub patch_size: usize,
    pub patches_per_scene: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            manifest: None,
            seed: 0,
            patch_size: DEFAULT_PATCH_SIZE,
            patches_per_scene: DEFAULT_PATCHES_PER_SCENE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tiled: bool,
    pub tile: usize,
    pub overlap: usize,
    /// Bytes a single-pass prediction may use before it is refused.
    pub memory_budget: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tiled: false,
            tile: DEFAULT_TILE,
            overlap: TILE_OVERLAP,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

impl EvalSection {
    pub fn mode(&self, force_tiled: bool) -> InferenceMode {
        if self.tiled || force_tiled {
            InferenceMode::Tiled {
                tile: self.tile,
                overlap: self.overlap,
            }
        } else {
            InferenceMode::Single {
                budget: self.memory_budget,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub split: SplitSection,
    pub train: TrainSection,
    pub loss: LossSpec,
    pub model: ModelConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Loads `path` when given, the defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.training().validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        if self.split.patch_size == 0 || self.split.patches_per_scene == 0 {
            return Err(CliError::Usage("split.patch_size and split.patches_per_scene must be positive".into()));
        }
        if self.eval.tile <= 2 * self.eval.overlap {
            return Err(CliError::Usage(format!(
                "eval.tile ({}) must exceed twice eval.overlap ({})",
                self.eval.tile, self.eval.overlap
            )));
        }
        Ok(())
    }

    pub fn training(&self) -> TrainingConfig {
        let t = &self.train;
        TrainingConfig {
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            lr_init: t.lr_init,
            lr_factor: t.lr_factor,
            lr_patience_epochs: t.lr_patience_epochs,
            lr_min: t.lr_min,
            early_stop_patience_epochs: t.early_stop_patience_epochs,
            seeds: t.seeds.clone(),
            max_epochs: t.max_epochs,
            val_tile: t.val_tile,
            loss: self.loss.clone(),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.split
            .manifest
            .clone()
            .unwrap_or_else(|| self.data.prepared.join(crate::commands::SPLIT_JSON))
    }

    /// Flat dotted-key TOML, one `key = value` line per leaf.
    pub fn to_flat_toml(&self) -> CliResult<String> {
        let value = toml::Value::try_from(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        Ok(lines.join("\n") + "\n")
    }
}

fn usage(e: seaice_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}
