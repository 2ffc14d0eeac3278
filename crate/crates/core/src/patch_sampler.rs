//! Month-keyed train/validation/test split and random patch placement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelRaster, Window};
use crate::ingest::SceneStack;

pub const TEST_MONTHS: [u32; 2] = [1, 7];
pub const VALIDATION_MONTHS: [u32; 4] = [2, 6, 8, 12];
pub const DEFAULT_PATCH_SIZE: usize = 1000;
pub const DEFAULT_PATCHES_PER_SCENE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    Left,
    Right,
    Top,
    Bottom,
}

impl Half {
    pub fn complement(self) -> Half {
        match self {
            Half::Left => Half::Right,
            Half::Right => Half::Left,
            Half::Top => Half::Bottom,
            Half::Bottom => Half::Top,
        }
    }

    /// Pixel window of this half of a `height` x `width` scene. Odd sizes put
    /// the extra row/column in the right/bottom half.
    pub fn window(self, height: usize, width: usize) -> Window {
        let (hw, hh) = (width / 2, height / 2);
        match self {
            Half::Left => Window::new(0, 0, height, hw),
            Half::Right => Window::new(0, hw, height, width - hw),
            Half::Top => Window::new(0, 0, hh, width),
            Half::Bottom => Window::new(hh, 0, height - hh, width),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValRegion {
    pub scene: String,
    pub half: Half,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    #[serde(rename = "train")]
    pub train_scenes: Vec<String>,
    #[serde(rename = "val")]
    pub val_regions: Vec<ValRegion>,
    #[serde(rename = "test")]
    pub test_scenes: Vec<String>,
    pub seed: u64,
    pub patch_size: usize,
    pub patches_per_scene: usize,
}

impl SplitManifest {
    pub fn val_half(&self, scene: &str) -> Option<Half> {
        self.val_regions
            .iter()
            .find(|r| r.scene == scene)
            .map(|r| r.half)
    }

    /// Pixels of `scene` available for training patches.
    pub fn train_window(&self, scene: &str, height: usize, width: usize) -> Option<Window> {
        if !self.train_scenes.iter().any(|s| s == scene) {
            return None;
        }
        Some(match self.val_half(scene) {
            Some(half) => half.complement().window(height, width),
            None => Window::new(0, 0, height, width),
        })
    }

    pub fn with_sampling(mut self, seed: u64, patch_size: usize, patches_per_scene: usize) -> Self {
        self.seed = seed;
        self.patch_size = patch_size;
        self.patches_per_scene = patches_per_scene;
        self
    }
}

fn parse_scene_id(id: &str) -> Result<(u32, u32)> {
    let bad = || Error::InvalidSceneId(id.to_string());
    let (y, m) = id.split_once('-').ok_or_else(bad)?;
    if y.len() != 4 || m.len() != 2 {
        return Err(bad());
    }
    let year = y.parse().map_err(|_| bad())?;
    let month: u32 = m.parse().map_err(|_| bad())?;
    if !(1..=12).contains(&month) {
        return Err(bad());
    }
    Ok((year, month))
}

/// Splits twelve monthly scenes of one year: January and July for testing,
/// the left half of February, June, August and December for validation,
/// everything else for training.
pub fn build_split<S: AsRef<str>>(scene_ids: &[S]) -> Result<SplitManifest> {
    let mut by_month: [Option<String>; 12] = Default::default();
    let mut year = None;
    for id in scene_ids {
        let id = id.as_ref();
        let (y, m) = parse_scene_id(id)?;
        if *year.get_or_insert(y) != y || by_month[m as usize - 1].is_some() {
            return Err(Error::InvalidSceneId(id.to_string()));
        }
        by_month[m as usize - 1] = Some(id.to_string());
    }
    let year = year.unwrap_or(2018);
    let missing: Vec<String> = (1..=12u32)
        .filter(|m| by_month[*m as usize - 1].is_none())
        .map(|m| format!("{year}-{m:02}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingMonths(missing));
    }
    let id = |m: u32| by_month[m as usize - 1].clone().unwrap();

    let test_scenes = TEST_MONTHS.iter().map(|&m| id(m)).collect();
    let val_regions = VALIDATION_MONTHS
        .iter()
        .map(|&m| ValRegion {
            scene: id(m),
            half: Half::Left,
        })
        .collect();
    let train_scenes = (1..=12u32)
        .filter(|m| !TEST_MONTHS.contains(m))
        .map(id)
        .collect();
    Ok(SplitManifest {
        train_scenes,
        val_regions,
        test_scenes,
        seed: 0,
        patch_size: DEFAULT_PATCH_SIZE,
        patches_per_scene: DEFAULT_PATCHES_PER_SCENE,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub scene: String,
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
}

impl Patch {
    pub fn window(&self) -> Window {
        Window::new(self.row0, self.col0, self.size, self.size)
    }
}

/// FNV-1a, used to give every scene its own reproducible RNG stream.
fn stream_id(scene_id: &str) -> u64 {
    scene_id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// `n` uniformly placed square windows inside `region`, reproducible for a
/// given (scene id, seed).
pub fn sample_windows(
    scene_id: &str,
    region: Window,
    n: usize,
    patch_size: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    if region.height < patch_size || region.width < patch_size || patch_size == 0 {
        return Err(Error::SceneTooSmall {
            scene: scene_id.to_string(),
            height: region.height,
            width: region.width,
            patch: patch_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(scene_id));
    Ok((0..n)
        .map(|_| Patch {
            scene: scene_id.to_string(),
            row0: region.row0 + rng.gen_range(0..=region.height - patch_size),
            col0: region.col0 + rng.gen_range(0..=region.width - patch_size),
            size: patch_size,
        })
        .collect())
}

/// Random training patches from `region` of `scene` (the whole scene when
/// `region` is `None`). Patches may overlap and may contain ignore pixels.
pub fn sample_patches(
    scene: &SceneStack,
    labels: &LabelRaster,
    region: Option<Window>,
    n: usize,
    patch_size: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    if labels.grid.width != scene.width() || labels.grid.height != scene.height() {
        return Err(Error::Shape(format!(
            "labels {}x{} do not match scene {} ({}x{})",
            labels.grid.height,
            labels.grid.width,
            scene.scene_id,
            scene.height(),
            scene.width()
        )));
    }
    let full = scene.grid.full_window();
    let region = region.unwrap_or(full);
    if !full.contains_window(&region) {
        return Err(Error::Shape(format!(
            "sampling region {region:?} exceeds scene {}",
            scene.scene_id
        )));
    }
    sample_windows(&scene.scene_id, region, n, patch_size, seed)
}

/// Training patches of every training scene in the manifest, restricted to
/// the non-validation half where one is reserved. `dims` returns a scene's
/// (height, width).
pub fn manifest_patches(
    manifest: &SplitManifest,
    mut dims: impl FnMut(&str) -> Result<(usize, usize)>,
) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for id in &manifest.train_scenes {
        let (h, w) = dims(id)?;
        let window = manifest
            .train_window(id, h, w)
            .expect("training scene has a training window");
        out.extend(sample_windows(
            id,
            window,
            manifest.patches_per_scene,
            manifest.patch_size,
            manifest.seed,
        )?);
    }
    Ok(out)
}
