//! The subcommands. Each returns a short human-readable summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use seaice_core::evaluator::{evaluate_scene, predict_scene, write_label_map, write_maps, EvalReport, InferenceMode};
use seaice_core::experiment::{run_experiment, Summary};
use seaice_core::ice_labels::{class_frequencies, IGNORE};
use seaice_core::ingest::{load_scene, read_charts, read_labels, rasterize_labels, write_labels};
use seaice_core::patch_sampler::manifest_patches;
use seaice_core::synth::write_dataset;
use seaice_core::trainer::load_checkpoint;
use seaice_core::{build_split, normalize, Dataset, LabeledScene, LossKind, SplitManifest};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const SPLIT_JSON: &str = "split.json";
pub const PATCHES_JSON: &str = "patches.json";
pub const EVALUATION_JSON: &str = "evaluation.json";

fn band_paths(dir: &Path, id: &str) -> [PathBuf; 3] {
    ["hh", "hv", "ia"].map(|b| dir.join(format!("{id}_{b}.tif")))
}

fn labels_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_labels.tif"))
}

fn chart_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_chart.geojson"))
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Scene ids with an HH band in `dir`, sorted.
pub fn scene_ids(dir: &Path) -> CliResult<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_hh.tif")).map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn synth(out: &Path, scenes: usize, size: usize, seed: u64, year: u32) -> CliResult<String> {
    std::fs::create_dir_all(out)?;
    let ids = write_dataset(out, year, scenes, size, seed)?;
    Ok(format!("wrote {} synthetic scenes ({size}x{size}) to {}", ids.len(), out.display()))
}

/// Label rasters, resampled bands, split manifest and patch index for every
/// scene in `data_dir`.
pub fn prepare(config: &RunConfig, data_dir: &Path, out: &Path) -> CliResult<String> {
    require_dir(data_dir, "data directory")?;
    let ids = scene_ids(data_dir)?;
    if ids.is_empty() {
        return Err(CliError::Usage(format!("no *_hh.tif scenes in {}", data_dir.display())));
    }
    for id in &ids {
        for p in band_paths(data_dir, id).iter().chain([&chart_path(data_dir, id)]) {
            if !p.exists() {
                return Err(CliError::Runtime(format!("scene {id}: missing {}", p.display())));
            }
        }
    }
    let manifest = build_split(&ids)?.with_sampling(
        config.split.seed,
        config.split.patch_size,
        config.split.patches_per_scene,
    );
    std::fs::create_dir_all(out)?;
    let mut dims = BTreeMap::new();
    for id in &ids {
        let [hh, hv, ia] = band_paths(data_dir, id);
        let stack = load_scene(&hh, &hv, &ia)?;
        let charts = read_charts(&chart_path(data_dir, id))?;
        let mut labels = rasterize_labels(&charts, &stack.grid)?;
        for (code, &nodata) in labels.codes.iter_mut().zip(&stack.nodata_mask) {
            if nodata {
                *code = IGNORE;
            }
        }
        let freq: Vec<String> = class_frequencies(&labels)
            .iter()
            .map(|(c, n)| format!("{} {n}", c.name()))
            .collect();
        info!("{id}: {}x{} pixels; {}", stack.height(), stack.width(), freq.join(", "));
        stack.write(out)?;
        write_labels(&labels_path(out, id), &labels)?;
        dims.insert(id.clone(), (stack.height(), stack.width()));
    }
    let patches = manifest_patches(&manifest, |id| Ok(dims[id]))?;
    std::fs::write(out.join(SPLIT_JSON), serde_json::to_string_pretty(&manifest)? + "\n")?;
    std::fs::write(out.join(PATCHES_JSON), serde_json::to_string_pretty(&patches)? + "\n")?;
    Ok(format!(
        "prepared {} scenes into {}: {} training, {} validation halves, {} test; {} patches",
        ids.len(),
        out.display(),
        manifest.train_scenes.len() - manifest.val_regions.len(),
        manifest.val_regions.len(),
        manifest.test_scenes.len(),
        patches.len()
    ))
}

/// Loads prepared scenes (bands and label rasters) by id.
pub fn load_prepared(dir: &Path, ids: &[String]) -> CliResult<Dataset> {
    let mut scenes = Vec::with_capacity(ids.len());
    for id in ids {
        let [hh, hv, ia] = band_paths(dir, id);
        let labels = labels_path(dir, id);
        for p in [&hh, &hv, &ia, &labels] {
            require_file(p, &format!("prepared file for scene {id}"))?;
        }
        let stack = load_scene(&hh, &hv, &ia)?;
        scenes.push(LabeledScene::new(normalize(&stack), read_labels(&labels)?)?);
    }
    Ok(Dataset::new(scenes)?)
}

fn read_manifest(path: &Path) -> CliResult<SplitManifest> {
    require_file(path, "split manifest")?;
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub struct TrainArgs {
    pub loss: Option<LossKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub tiled: bool,
}

/// Runs the configured experiment into `<out>/<loss>/`.
pub fn train(config: &RunConfig, args: &TrainArgs) -> CliResult<String> {
    require_dir(&config.data.prepared, "prepared data directory")?;
    if let Some(p) = &config.model.pretrained_encoder {
        require_file(p, "pretrained encoder")?;
    }
    let manifest = read_manifest(&config.manifest_path())?;
    let mut training = config.training();
    if let Some(kind) = args.loss {
        training.loss.kind = kind;
    }
    if let Some(seed) = args.seed {
        training.seeds = vec![seed];
    }
    training.validate()?;
    let mut ids: Vec<String> = manifest.train_scenes.iter().chain(&manifest.test_scenes).cloned().collect();
    ids.sort();
    ids.dedup();
    let data = load_prepared(&config.data.prepared, &ids)?;
    let out = args.out.clone().unwrap_or_else(|| config.output.dir.clone()).join(training.loss.kind.as_str());
    std::fs::create_dir_all(&out)?;
    let mut effective = config.clone();
    effective.loss = training.loss.clone();
    effective.train.seeds = training.seeds.clone();
    std::fs::write(out.join("config.toml"), effective.to_flat_toml()?)?;
    let report = run_experiment(
        &config.model,
        &training,
        &manifest,
        &data,
        &out,
        config.eval.mode(args.tiled),
    )?;
    Ok(report.summary_line())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointResult {
    pub checkpoint: PathBuf,
    pub label: String,
    /// Mean over the evaluated scenes.
    pub weighted_f1: f64,
    pub per_scene: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scenes: Vec<String>,
    pub checkpoints: Vec<CheckpointResult>,
    /// Across checkpoints.
    pub weighted_f1: Summary,
    pub per_scene: BTreeMap<String, Summary>,
}

impl Evaluation {
    pub fn summary_line(&self) -> String {
        format!(
            "average test weighted F1 {:.3} over {} checkpoint(s), minimum {:.3}, maximum {:.3}",
            self.weighted_f1.mean,
            self.checkpoints.len(),
            self.weighted_f1.min,
            self.weighted_f1.max
        )
    }
}

/// Short unique directory names for the checkpoints: the last two path
/// components of each checkpoint directory (`ce-0`).
fn checkpoint_labels(paths: &[PathBuf]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::with_capacity(paths.len());
    for p in paths {
        let dir = if p.is_file() || p.extension().is_some() {
            p.parent().unwrap_or(Path::new("."))
        } else {
            p.as_path()
        };
        let parts: Vec<String> = dir
            .components()
            .rev()
            .take(2)
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .filter(|s| s != "." && s != "/")
            .collect();
        let mut label = parts.into_iter().rev().collect::<Vec<_>>().join("-");
        if label.is_empty() {
            label = "checkpoint".into();
        }
        if labels.contains(&label) {
            label = format!("{label}-{}", labels.len());
        }
        labels.push(label);
    }
    labels
}

pub struct EvaluateArgs {
    pub checkpoints: Vec<PathBuf>,
    /// Defaults to the manifest's test scenes.
    pub scenes: Vec<String>,
    pub out: PathBuf,
    pub tiled: bool,
}

pub fn evaluate(config: &RunConfig, args: &EvaluateArgs) -> CliResult<(Evaluation, String)> {
    if args.checkpoints.is_empty() {
        return Err(CliError::Usage("at least one --checkpoint is required".into()));
    }
    for c in &args.checkpoints {
        require_file(c, "checkpoint")?;
    }
    require_dir(&config.data.prepared, "prepared data directory")?;
    let scenes = if args.scenes.is_empty() {
        read_manifest(&config.manifest_path())?.test_scenes
    } else {
        args.scenes.clone()
    };
    let data = load_prepared(&config.data.prepared, &scenes)?;
    let mode = config.eval.mode(args.tiled);
    let mut results = Vec::new();
    for (path, label) in args.checkpoints.iter().zip(checkpoint_labels(&args.checkpoints)) {
        let (model, _) = load_checkpoint(path)?;
        let dir = args.out.join(&label);
        std::fs::create_dir_all(&dir)?;
        let mut per_scene = BTreeMap::new();
        for id in &scenes {
            let scene = data.get(id)?;
            let (pred, report) = evaluate_scene(&model, &scene.stack, &scene.labels, mode)?;
            write_report(&dir, &report)?;
            write_maps(&dir, id, &pred, &scene.labels)?;
            info!("{label} {id}: weighted F1 {:.4}", report.weighted_f1);
            per_scene.insert(id.clone(), report.weighted_f1);
        }
        let weighted_f1 = per_scene.values().sum::<f64>() / per_scene.len().max(1) as f64;
        results.push(CheckpointResult {
            checkpoint: path.clone(),
            label,
            weighted_f1,
            per_scene,
        });
    }
    let f1: Vec<f64> = results.iter().map(|r| r.weighted_f1).collect();
    let weighted_f1 = Summary::of(&f1).expect("at least one checkpoint");
    let per_scene = scenes
        .iter()
        .filter_map(|id| {
            let v: Vec<f64> = results.iter().filter_map(|r| r.per_scene.get(id).copied()).collect();
            Summary::of(&v).map(|s| (id.clone(), s))
        })
        .collect();
    let evaluation = Evaluation {
        scenes,
        checkpoints: results,
        weighted_f1,
        per_scene,
    };
    std::fs::write(args.out.join(EVALUATION_JSON), serde_json::to_string_pretty(&evaluation)? + "\n")?;
    let line = evaluation.summary_line();
    Ok((evaluation, line))
}

fn write_report(dir: &Path, report: &EvalReport) -> CliResult<()> {
    let id = &report.scene_id;
    std::fs::write(dir.join(format!("{id}_report.json")), serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(dir.join(format!("{id}_confusion.csv")), report.confusion.to_csv())?;
    Ok(())
}

/// Predicts one scene from raw or prepared bands; writes the label GeoTIFF
/// and its colored map.
pub fn predict(checkpoint: &Path, data_dir: &Path, scene: &str, out: &Path, mode: InferenceMode) -> CliResult<String> {
    require_file(checkpoint, "checkpoint")?;
    let paths = band_paths(data_dir, scene);
    for p in &paths {
        require_file(p, &format!("band of scene {scene}"))?;
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let stack = load_scene(&paths[0], &paths[1], &paths[2])?;
    let pred = predict_scene(&model, &normalize(&stack), mode)?;
    std::fs::create_dir_all(out)?;
    let tif = out.join(format!("{scene}_pred.tif"));
    write_labels(&tif, &pred)?;
    write_label_map(&out.join(format!("{scene}_pred.png")), &pred)?;
    Ok(format!("wrote {} and its map", tif.display()))
}

/// Colored maps for a label GeoTIFF, plus truth and error maps when a truth
/// raster is given.
pub fn render(labels: &Path, truth: Option<&Path>, out: &Path) -> CliResult<String> {
    require_file(labels, "label raster")?;
    let pred = read_labels(labels)?;
    let stem = labels
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "labels".into());
    match truth {
        Some(t) => {
            require_file(t, "truth raster")?;
            let truth = read_labels(t)?;
            let id = stem.strip_suffix("_pred").unwrap_or(&stem);
            let paths = write_maps(out, id, &pred, &truth)?;
            Ok(format!("wrote {} maps to {}", paths.len(), out.display()))
        }
        None => {
            let path = out.join(format!("{stem}.png"));
            write_label_map(&path, &pred)?;
            Ok(format!("wrote {}", path.display()))
        }
    }
}
