use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed chart record: {0}")]
    MalformedChart(String),

    #[error("{path}: feature {index}: {reason}")]
    ChartSchema {
        path: PathBuf,
        index: usize,
        reason: String,
    },

    #[error("ingest error in {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("invalid target code {0} (expected a class code or the ignore value)")]
    InvalidTarget(u8),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing months: {}", .0.join(", "))]
    MissingMonths(Vec<String>),

    #[error("invalid scene id {0:?} (expected YYYY-MM)")]
    InvalidSceneId(String),

    #[error("scene {scene} region is {height}x{width} pixels, smaller than the {patch}-pixel patch")]
    SceneTooSmall {
        scene: String,
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("incompatible weights: {0}")]
    IncompatibleWeights(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no evaluable pixels: every truth pixel carries the ignore value")]
    NoEvaluablePixels,

    #[error("non-finite training loss at epoch {epoch}{}", diagnostic.as_ref().map(|p| format!("; diagnostic checkpoint written to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        epoch: usize,
        diagnostic: Option<PathBuf>,
    },

    #[error(
        "single-pass inference over {height}x{width} pixels needs about {required} bytes, above the {budget}-byte budget; rerun in tiled mode (--tiled)"
    )]
    InferenceMemory {
        height: usize,
        width: usize,
        required: u64,
        budget: u64,
    },

    #[error("invalid synthetic scene spec: {0}")]
    SynthSpec(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("geojson: {0}")]
    GeoJson(#[from] Box<geojson::Error>),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor archive: {0}")]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
