//! Sea-ice type segmentation of SAR scenes: dominant ice-type labels from ice
//! charts, scene ingestion, patch sampling, a compact ResNet18/ASPP network
//! with hand-written gradients, three segmentation losses, the training
//! protocol, and full-scene evaluation.

pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod grid;
pub mod ice_labels;
pub mod ingest;
pub mod losses;
pub mod model;
pub mod nn;
pub mod patch_sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use evaluator::{predict_scene, weighted_f1, ConfusionMatrix, EvalReport, InferenceMode};
pub use experiment::{run_experiment, ExperimentReport};
pub use grid::{GeoTransform, Grid, LabelRaster, Window};
pub use ice_labels::{dominant_type, ChartPolygon, IceClass, IGNORE};
pub use ingest::{load_scene, normalize, NormalizedStack, SceneStack};
pub use losses::{LossKind, LossSpec};
pub use model::{ModelConfig, SegmentationModel};
pub use patch_sampler::{build_split, SplitManifest};
pub use synth::{generate, SynthSpec};
pub use trainer::{train, Dataset, LabeledScene, TrainingConfig};
