use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainingConfig};
use crate::error::Result;
use crate::model::{ModelConfig, SegmentationModel};

pub const CHECKPOINT_WEIGHTS: &str = "checkpoint.safetensors";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const HISTORY_CSV: &str = "history.csv";

/// JSON sidecar stored next to the weight archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub training_config: TrainingConfig,
    pub seed: u64,
    /// Epoch whose weights were kept.
    pub epoch: usize,
    pub val_loss: f64,
    pub metric_history: Vec<EpochRecord>,
    /// Batch-norm running statistics were updated during training rather
    /// than frozen at their initial values.
    pub batch_norm_stats_updated: bool,
}

/// Writes `checkpoint.safetensors` and `checkpoint.json` into `dir`.
pub fn save_checkpoint(dir: &Path, model: &SegmentationModel, meta: &CheckpointMeta) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    model.save_weights(&dir.join(CHECKPOINT_WEIGHTS))?;
    std::fs::write(dir.join(CHECKPOINT_JSON), serde_json::to_string_pretty(meta)?)?;
    Ok(dir.to_path_buf())
}

/// Accepts the checkpoint directory, its weight archive or its sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(SegmentationModel, CheckpointMeta)> {
    let dir = if path.is_dir() {
        path
    } else {
        path.parent().unwrap_or(Path::new("."))
    };
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(dir.join(CHECKPOINT_JSON))?)?;
    let config = ModelConfig {
        pretrained_encoder: None,
        ..meta.model_config.clone()
    };
    let mut model = SegmentationModel::build(&config, meta.seed)?;
    model.load_weights(&dir.join(CHECKPOINT_WEIGHTS))?;
    Ok((model, meta))
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_loss,lr")?;
    for r in history {
        writeln!(f, "{},{},{},{:e}", r.epoch, r.train_loss, r.val_loss, r.lr)?;
    }
    f.flush()?;
    Ok(())
}
