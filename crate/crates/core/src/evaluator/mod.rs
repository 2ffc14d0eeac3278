//! Full-scene prediction, weighted F1 with per-class scores, and colored
//! prediction and error maps.

mod metrics;
mod predict;
mod render;

pub use metrics::{weighted_f1, ClassScore, ConfusionMatrix, EvalReport};
pub use predict::{estimate_inference_bytes, predict_scene, InferenceMode, DEFAULT_MEMORY_BUDGET, DEFAULT_TILE, TILE_OVERLAP};
pub use render::{
    class_color, render_errors, render_labels, world_file, write_label_map, write_maps, BLANK_COLOR, ERROR_COLOR, IGNORE_COLOR,
    NO_ERROR_COLOR, PALETTE,
};

use crate::error::Result;
use crate::grid::LabelRaster;
use crate::ingest::NormalizedStack;
use crate::model::SegmentationModel;

/// Predicts `scene` and scores it against `truth`.
pub fn evaluate_scene(
    model: &SegmentationModel,
    scene: &NormalizedStack,
    truth: &LabelRaster,
    mode: InferenceMode,
) -> Result<(LabelRaster, EvalReport)> {
    let pred = predict_scene(model, scene, mode)?;
    let mut report = weighted_f1(&pred, truth)?;
    report.scene_id = scene.scene_id.clone();
    Ok((pred, report))
}
