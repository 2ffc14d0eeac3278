use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelRaster, Window};
use crate::ingest::NormalizedStack;
use crate::nn::Tensor;
use crate::patch_sampler::{Patch, SplitManifest};

/// A normalized scene with its label raster on the same grid.
#[derive(Clone, Debug)]
pub struct LabeledScene {
    pub stack: NormalizedStack,
    pub labels: LabelRaster,
}

impl LabeledScene {
    pub fn new(stack: NormalizedStack, labels: LabelRaster) -> Result<Self> {
        if (stack.grid.height, stack.grid.width) != (labels.grid.height, labels.grid.width) {
            return Err(Error::Shape(format!(
                "labels {}x{} do not match scene {} ({}x{})",
                labels.grid.height, labels.grid.width, stack.scene_id, stack.grid.height, stack.grid.width
            )));
        }
        Ok(Self { stack, labels })
    }

    pub fn id(&self) -> &str {
        &self.stack.scene_id
    }

    /// Copies the bands (band-major) and labels of `window` into the buffers.
    pub fn extract_into(&self, window: &Window, bands: &mut Vec<f32>, labels: &mut Vec<u8>) {
        let w = self.stack.grid.width;
        for b in 0..NormalizedStack::CHANNELS {
            let band = self.stack.band(b);
            for r in window.row0..window.row0 + window.height {
                bands.extend_from_slice(&band[r * w + window.col0..r * w + window.col0 + window.width]);
            }
        }
        for r in window.row0..window.row0 + window.height {
            labels.extend_from_slice(&self.labels.codes[r * w + window.col0..r * w + window.col0 + window.width]);
        }
    }

    pub fn extract(&self, window: &Window) -> (Tensor, Vec<u8>) {
        let mut bands = Vec::with_capacity(NormalizedStack::CHANNELS * window.area());
        let mut labels = Vec::with_capacity(window.area());
        self.extract_into(window, &mut bands, &mut labels);
        (
            Tensor::from_vec([1, NormalizedStack::CHANNELS, window.height, window.width], bands),
            labels,
        )
    }
}

/// Scenes indexed by id.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    scenes: Vec<LabeledScene>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(scenes: Vec<LabeledScene>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in scenes.iter().enumerate() {
            if index.insert(s.id().to_string(), i).is_some() {
                return Err(Error::Config(format!("duplicate scene {}", s.id())));
            }
        }
        Ok(Self { scenes, index })
    }

    pub fn get(&self, id: &str) -> Result<&LabeledScene> {
        self.index
            .get(id)
            .map(|&i| &self.scenes[i])
            .ok_or_else(|| Error::EmptyDataset(format!("scene {id} is not loaded")))
    }

    pub fn scenes(&self) -> &[LabeledScene] {
        &self.scenes
    }
}

/// A rectangular piece of a named scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub scene: String,
    pub window: Window,
}

impl From<&Patch> for Region {
    fn from(p: &Patch) -> Self {
        Region {
            scene: p.scene.clone(),
            window: p.window(),
        }
    }
}

/// The validation half of every validation scene in the manifest.
pub fn validation_regions(manifest: &SplitManifest, data: &Dataset) -> Result<Vec<Region>> {
    manifest
        .val_regions
        .iter()
        .map(|v| {
            let s = data.get(&v.scene)?;
            Ok(Region {
                scene: v.scene.clone(),
                window: v.half.window(s.stack.grid.height, s.stack.grid.width),
            })
        })
        .collect()
}

/// Non-overlapping tiles covering `window`; edge tiles may be smaller.
pub fn tile_windows(window: &Window, tile: usize) -> Vec<Window> {
    let mut out = Vec::new();
    let mut r = 0;
    while r < window.height {
        let h = tile.min(window.height - r);
        let mut c = 0;
        while c < window.width {
            let w = tile.min(window.width - c);
            out.push(Window::new(window.row0 + r, window.col0 + c, h, w));
            c += w;
        }
        r += h;
    }
    out
}
