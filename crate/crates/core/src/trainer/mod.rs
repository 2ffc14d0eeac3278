//! Optimization protocol: Adam, reduce-on-plateau learning rate, early
//! stopping on validation loss and retention of the best weights.

mod adam;
mod checkpoint;
mod data;
mod schedule;

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, write_history_csv, CheckpointMeta, CHECKPOINT_JSON, CHECKPOINT_WEIGHTS, HISTORY_CSV};
pub use data::{tile_windows, validation_regions, Dataset, LabeledScene, Region};
pub use schedule::{PlateauSchedule, Step};

use crate::error::{Error, Result};
use crate::ingest::NormalizedStack;
use crate::losses::LossSpec;
use crate::model::SegmentationModel;
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr_init: f64,
    pub lr_factor: f64,
    pub lr_patience_epochs: usize,
    pub lr_min: f64,
    pub early_stop_patience_epochs: usize,
    pub seeds: Vec<u64>,
    pub max_epochs: usize,
    /// Validation tile side; `None` runs each validation region in one pass.
    pub val_tile: Option<usize>,
    pub loss: LossSpec,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            optimizer: Optimizer::Adam,
            lr_init: 1e-5,
            lr_factor: 0.1,
            lr_patience_epochs: 5,
            lr_min: 1e-8,
            early_stop_patience_epochs: 20,
            seeds: vec![0, 1, 2],
            max_epochs: 500,
            val_tile: None,
            loss: LossSpec::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return bad(format!(
                "need 0 < lr_min <= lr_init, got lr_min={} lr_init={}",
                self.lr_min, self.lr_init
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        if self.lr_patience_epochs == 0 || self.early_stop_patience_epochs == 0 || self.max_epochs == 0 {
            return bad("patiences and max_epochs must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let Some(t) = self.val_tile {
            if t == 0 || t % 16 != 0 {
                return bad(format!("val_tile must be a positive multiple of 16, got {t}"));
            }
        }
        self.loss.validate()
    }

    pub fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule::new(
            self.lr_init,
            self.lr_factor,
            self.lr_patience_epochs,
            self.lr_min,
            self.early_stop_patience_epochs,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

/// Loss over a set of regions, each run through the model in inference mode,
/// averaged with weights equal to the contributing pixel counts.
pub fn validation_loss(
    model: &SegmentationModel,
    data: &Dataset,
    regions: &[Region],
    loss: &LossSpec,
    tile: Option<usize>,
) -> Result<f64> {
    let (mut total, mut pixels) = (0.0f64, 0usize);
    for region in regions {
        let scene = data.get(&region.scene)?;
        let windows = match tile {
            Some(t) => tile_windows(&region.window, t),
            None => vec![region.window],
        };
        for w in windows {
            let (x, targets) = scene.extract(&w);
            let logits = model.infer(&x)?;
            let out = loss.evaluate(logits.data(), logits.shape(), &targets)?;
            total += out.value * out.pixels as f64;
            pixels += out.pixels;
        }
    }
    if pixels == 0 {
        return Err(Error::EmptyDataset("validation regions contain no labeled pixels".into()));
    }
    Ok(total / pixels as f64)
}

fn assemble(data: &Dataset, batch: &[&Region]) -> Result<(Tensor, Vec<u8>)> {
    let (h, w) = (batch[0].window.height, batch[0].window.width);
    let mut bands = Vec::with_capacity(batch.len() * NormalizedStack::CHANNELS * h * w);
    let mut labels = Vec::with_capacity(batch.len() * h * w);
    for r in batch {
        if (r.window.height, r.window.width) != (h, w) {
            return Err(Error::Shape("training patches in one batch differ in size".into()));
        }
        data.get(&r.scene)?.extract_into(&r.window, &mut bands, &mut labels);
    }
    Ok((Tensor::from_vec([batch.len(), NormalizedStack::CHANNELS, h, w], bands), labels))
}

fn snapshot(model: &SegmentationModel) -> Vec<Vec<f32>> {
    model.named_params().into_iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(model: &mut SegmentationModel, values: Vec<Vec<f32>>) {
    for ((_, p), v) in model.named_params_mut().into_iter().zip(values) {
        p.value = v;
    }
}

/// Trains `model` in place and leaves it holding the weights of the epoch
/// with the lowest validation loss.
///
/// Patches are reshuffled every epoch from a generator seeded with `seed`.
/// A non-finite training loss aborts the run; when `diagnostics` is given the
/// offending weights are saved there first.
pub fn train(
    model: &mut SegmentationModel,
    data: &Dataset,
    patches: &[Region],
    val: &[Region],
    config: &TrainingConfig,
    seed: u64,
    diagnostics: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if patches.is_empty() {
        return Err(Error::EmptyDataset("no training patches".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("no validation regions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut order: Vec<&Region> = patches.iter().collect();
    let mut adam = Adam::default();
    let mut schedule = config.schedule();
    let mut history = Vec::new();
    let mut best_weights = snapshot(model);
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr();
        order.shuffle(&mut rng);
        let (mut total, mut pixels) = (0.0f64, 0usize);
        for batch in order.chunks(config.batch_size) {
            let (x, targets) = assemble(data, batch)?;
            let logits = model.forward_train(&x)?;
            let out = config.loss.evaluate(logits.data(), logits.shape(), &targets)?;
            if !out.value.is_finite() {
                model.clear_cache();
                let diagnostic = match diagnostics {
                    Some(dir) => {
                        std::fs::create_dir_all(dir)?;
                        let path = dir.join("diagnostic.safetensors");
                        model.save_weights(&path)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss { epoch, diagnostic });
            }
            if out.pixels == 0 {
                model.clear_cache();
                continue;
            }
            model.zero_grad();
            model.backward(&Tensor::from_vec(logits.shape(), out.grad));
            adam.step(model.named_params_mut().into_iter().map(|(_, p)| p), lr);
            total += out.value * out.pixels as f64;
            pixels += out.pixels;
        }
        if pixels == 0 {
            return Err(Error::EmptyDataset("training patches contain no labeled pixels".into()));
        }
        let train_loss = total / pixels as f64;
        let val_loss = validation_loss(model, data, val, &config.loss, config.val_tile)?;
        if !val_loss.is_finite() {
            warn!("epoch {epoch}: validation loss is {val_loss}");
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        let step = schedule.step(epoch, val_loss);
        info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.1e}{}",
            if step.improved { " *" } else { "" }
        );
        if step.improved {
            best_weights = snapshot(model);
        }
        if step.lr_reduced {
            info!("learning rate reduced to {:.1e}", schedule.lr());
        }
        if step.stop {
            stop = StopReason::EarlyStop;
            break;
        }
    }

    let (best_epoch, best_val_loss) = schedule
        .best()
        .ok_or_else(|| Error::EmptyDataset("no epoch produced a finite validation loss".into()))?;
    restore(model, best_weights);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
        stop,
    })
}
