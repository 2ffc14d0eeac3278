//! Multi-seed training runs with test-set evaluation and a
//! mean/min/max summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate_scene, write_maps, EvalReport, InferenceMode};
use crate::losses::LossKind;
use crate::model::{ModelConfig, SegmentationModel};
use crate::patch_sampler::{manifest_patches, SplitManifest};
use crate::trainer::{
    save_checkpoint, train, validation_regions, write_history_csv, CheckpointMeta, Dataset, Region, StopReason,
    TrainingConfig, HISTORY_CSV,
};

pub const REPORT_JSON: &str = "report.json";

/// Training patches for every scene that contributes training pixels: whole
/// training scenes and the non-validation half of validation scenes.
pub fn training_patches(manifest: &SplitManifest, data: &Dataset) -> Result<Vec<Region>> {
    let patches = manifest_patches(manifest, |id| {
        let g = &data.get(id)?.stack.grid;
        Ok((g.height, g.width))
    })?;
    Ok(patches.iter().map(Region::from).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Mean of the per-scene weighted F1 over the test scenes.
    pub weighted_f1: f64,
    pub per_scene: BTreeMap<String, f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stop: StopReason,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub loss: LossKind,
    pub test_scenes: Vec<String>,
    pub seeds: Vec<SeedResult>,
    pub weighted_f1: Summary,
    /// Per test scene: summary across seeds.
    pub per_scene: BTreeMap<String, Summary>,
}

impl ExperimentReport {
    pub fn from_seeds(loss: LossKind, test_scenes: Vec<String>, seeds: Vec<SeedResult>) -> Result<Self> {
        let f1: Vec<f64> = seeds.iter().map(|s| s.weighted_f1).collect();
        let weighted_f1 = Summary::of(&f1).ok_or_else(|| Error::Config("no seeds were run".into()))?;
        let per_scene = test_scenes
            .iter()
            .filter_map(|id| {
                let v: Vec<f64> = seeds.iter().filter_map(|s| s.per_scene.get(id).copied()).collect();
                Summary::of(&v).map(|s| (id.clone(), s))
            })
            .collect();
        Ok(Self {
            loss,
            test_scenes,
            seeds,
            weighted_f1,
            per_scene,
        })
    }

    /// One line in the average / minimum / maximum form.
    pub fn summary_line(&self) -> String {
        format!(
            "{}: average test weighted F1 {:.3} over {} seed(s), minimum {:.3}, maximum {:.3}",
            self.loss,
            self.weighted_f1.mean,
            self.seeds.len(),
            self.weighted_f1.min,
            self.weighted_f1.max
        )
    }
}

/// Trains one model per configured seed into `out/<seed>/`, evaluates each
/// on the test scenes and writes `out/report.json`.
pub fn run_experiment(
    model_config: &ModelConfig,
    training: &TrainingConfig,
    manifest: &SplitManifest,
    data: &Dataset,
    out: &Path,
    inference: InferenceMode,
) -> Result<ExperimentReport> {
    training.validate()?;
    model_config.validate()?;
    let patches = training_patches(manifest, data)?;
    let val = validation_regions(manifest, data)?;
    info!(
        "{} training patches, {} validation regions, {} test scenes",
        patches.len(),
        val.len(),
        manifest.test_scenes.len()
    );
    let mut results = Vec::with_capacity(training.seeds.len());
    for &seed in &training.seeds {
        let dir = out.join(seed.to_string());
        info!("{} loss, seed {seed}", training.loss.kind);
        let mut model = SegmentationModel::build(model_config, seed)?;
        let outcome = train(&mut model, data, &patches, &val, training, seed, Some(&dir))?;
        let meta = CheckpointMeta {
            model_config: model_config.clone(),
            training_config: training.clone(),
            seed,
            epoch: outcome.best_epoch,
            val_loss: outcome.best_val_loss,
            metric_history: outcome.history.clone(),
            batch_norm_stats_updated: true,
        };
        let checkpoint = save_checkpoint(&dir, &model, &meta)?;
        write_history_csv(&dir.join(HISTORY_CSV), &outcome.history)?;

        let reports = evaluate_test_scenes(&model, manifest, data, inference, Some(&dir))?;
        let per_scene: BTreeMap<String, f64> = reports.iter().map(|r| (r.scene_id.clone(), r.weighted_f1)).collect();
        let weighted_f1 = if per_scene.is_empty() {
            f64::NAN
        } else {
            per_scene.values().sum::<f64>() / per_scene.len() as f64
        };
        info!("seed {seed}: best epoch {}, test weighted F1 {weighted_f1:.4}", outcome.best_epoch);
        results.push(SeedResult {
            seed,
            weighted_f1,
            per_scene,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            epochs_run: outcome.history.len(),
            stop: outcome.stop,
            checkpoint,
        });
    }
    let report = ExperimentReport::from_seeds(training.loss.kind, manifest.test_scenes.clone(), results)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(REPORT_JSON), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Evaluates `model` on every test scene. With `out`, per-scene reports,
/// confusion matrices and maps are written there.
pub fn evaluate_test_scenes(
    model: &SegmentationModel,
    manifest: &SplitManifest,
    data: &Dataset,
    inference: InferenceMode,
    out: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for id in &manifest.test_scenes {
        let scene = data.get(id)?;
        let (pred, report) = evaluate_scene(model, &scene.stack, &scene.labels, inference)?;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("{id}_eval.json")), serde_json::to_string_pretty(&report)?)?;
            std::fs::write(dir.join(format!("{id}_confusion.csv")), report.confusion.to_csv())?;
            write_maps(&dir.join("maps"), id, &pred, &scene.labels)?;
        }
        reports.push(report);
    }
    Ok(reports)
}
