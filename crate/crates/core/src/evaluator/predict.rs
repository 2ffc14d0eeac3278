use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelRaster, Window};
use crate::ice_labels::IGNORE;
use crate::ingest::NormalizedStack;
use crate::model::SegmentationModel;
use crate::nn::Tensor;

/// Default single-pass budget: 4 GiB of estimated activation memory.
pub const DEFAULT_MEMORY_BUDGET: u64 = 4 << 30;
pub const DEFAULT_TILE: usize = 1024;
pub const TILE_OVERLAP: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// The whole scene in one forward pass, refused above `budget` bytes.
    Single { budget: u64 },
    /// Overlapping `tile`-sized windows, each contributing only its center.
    Tiled { tile: usize, overlap: usize },
}

impl Default for InferenceMode {
    fn default() -> Self {
        InferenceMode::Single {
            budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

impl InferenceMode {
    pub fn tiled() -> Self {
        InferenceMode::Tiled {
            tile: DEFAULT_TILE,
            overlap: TILE_OVERLAP,
        }
    }
}

/// Rough peak activation memory of one inference pass, in bytes. The stem
/// holds about 32 floats per input pixel (two 64-channel maps at half
/// resolution) next to the padded input and the full-resolution logits.
pub fn estimate_inference_bytes(model: &SegmentationModel, height: usize, width: usize) -> u64 {
    let s = model.output_stride();
    let (ph, pw) = (height.div_ceil(s) * s, width.div_ceil(s) * s);
    let per_pixel = model.config().in_channels + 32 + 2 * model.num_classes() + 8;
    (ph * pw * per_pixel * 4) as u64
}

fn argmax_into(logits: &Tensor, out: &mut [u8], out_width: usize, keep: &Window, offset: (usize, usize)) {
    // `keep` is in tile coordinates; `offset` places the tile in the output
    let (k, w, p) = (logits.c(), logits.w(), logits.plane_len());
    let data = logits.sample(0);
    for r in keep.row0..keep.row0 + keep.height {
        for c in keep.col0..keep.col0 + keep.width {
            let i = r * w + c;
            let mut best = 0;
            for class in 1..k {
                if data[class * p + i] > data[best * p + i] {
                    best = class;
                }
            }
            out[(offset.0 + r) * out_width + offset.1 + c] = best as u8;
        }
    }
}

/// Tile origins along one axis and the half-open span each tile keeps.
fn axis_plan(len: usize, tile: usize, overlap: usize) -> Vec<(usize, usize, usize)> {
    if len <= tile {
        return vec![(0, 0, len)];
    }
    let step = tile - overlap;
    let mut origins: Vec<usize> = (0..).map(|i| i * step).take_while(|&o| o + tile < len).collect();
    origins.push(len - tile);
    origins.dedup();
    let mut plan = Vec::with_capacity(origins.len());
    for (i, &o) in origins.iter().enumerate() {
        let start = if i == 0 { 0 } else { (origins[i - 1] + tile + o) / 2 };
        let end = match origins.get(i + 1) {
            Some(&next) => (o + tile + next) / 2,
            None => len,
        };
        plan.push((o, start, end));
    }
    plan
}

/// Per-pixel argmax class over the whole scene. Nodata pixels get the ignore
/// value.
pub fn predict_scene(model: &SegmentationModel, scene: &NormalizedStack, mode: InferenceMode) -> Result<LabelRaster> {
    let (h, w) = (scene.grid.height, scene.grid.width);
    let mut codes = vec![IGNORE; h * w];
    match mode {
        InferenceMode::Single { budget } => {
            let required = estimate_inference_bytes(model, h, w);
            if required > budget {
                return Err(Error::InferenceMemory {
                    height: h,
                    width: w,
                    required,
                    budget,
                });
            }
            let x = Tensor::from_vec([1, NormalizedStack::CHANNELS, h, w], scene.bands.clone());
            let logits = model.infer(&x)?;
            argmax_into(&logits, &mut codes, w, &Window::new(0, 0, h, w), (0, 0));
        }
        InferenceMode::Tiled { tile, overlap } => {
            if tile == 0 || overlap >= tile {
                return Err(Error::Config(format!("tile {tile} must exceed overlap {overlap}")));
            }
            for &(r0, rs, re) in &axis_plan(h, tile, overlap) {
                for &(c0, cs, ce) in &axis_plan(w, tile, overlap) {
                    let window = Window::new(r0, c0, tile.min(h), tile.min(w));
                    let part = scene.window(&window);
                    let x = Tensor::from_vec(
                        [1, NormalizedStack::CHANNELS, window.height, window.width],
                        part.bands,
                    );
                    let logits = model.infer(&x)?;
                    let keep = Window::new(rs - r0, cs - c0, re - rs, ce - cs);
                    argmax_into(&logits, &mut codes, w, &keep, (r0, c0));
                }
            }
        }
    }
    for (c, &m) in codes.iter_mut().zip(&scene.nodata_mask) {
        if m {
            *c = IGNORE;
        }
    }
    LabelRaster::new(scene.grid.clone(), codes)
}
