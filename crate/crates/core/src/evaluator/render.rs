use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage, Rgba, RgbaImage};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelRaster};
use crate::ice_labels::{IceClass, IGNORE};

/// Class colors by code; one legend for every map.
pub const PALETTE: [[u8; 3]; IceClass::COUNT] = [
    [0, 40, 120],    // Water, dark blue
    [140, 200, 255], // NewIce, light blue
    [250, 220, 40],  // YoungIce, yellow
    [245, 140, 20],  // FirstYearIce, orange
    [210, 30, 30],   // OldIce, red
];
pub const IGNORE_COLOR: [u8; 3] = [128, 128, 128];
pub const NO_ERROR_COLOR: [u8; 4] = [255, 255, 255, 255];
pub const ERROR_COLOR: [u8; 4] = [0, 0, 0, 255];
pub const BLANK_COLOR: [u8; 4] = [0, 0, 0, 0];

pub fn class_color(code: u8) -> [u8; 3] {
    PALETTE.get(code as usize).copied().unwrap_or(IGNORE_COLOR)
}

pub fn render_labels(labels: &LabelRaster) -> RgbImage {
    let (w, h) = (labels.grid.width as u32, labels.grid.height as u32);
    RgbImage::from_fn(w, h, |x, y| Rgb(class_color(labels.codes[(y * w + x) as usize])))
}

/// Black where the prediction differs from the truth, white where it agrees,
/// transparent where the truth is ignore.
pub fn render_errors(pred: &LabelRaster, truth: &LabelRaster) -> Result<RgbaImage> {
    if pred.codes.len() != truth.codes.len() || pred.grid.width != truth.grid.width {
        return Err(Error::Shape("prediction and truth rasters differ in shape".into()));
    }
    let (w, h) = (truth.grid.width as u32, truth.grid.height as u32);
    Ok(RgbaImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        Rgba(match (truth.codes[i], pred.codes[i]) {
            (IGNORE, _) => BLANK_COLOR,
            (t, p) if t == p => NO_ERROR_COLOR,
            _ => ERROR_COLOR,
        })
    }))
}

/// ESRI world file contents: pixel sizes, rotations, upper-left pixel center.
pub fn world_file(grid: &Grid) -> String {
    let t = &grid.transform;
    format!(
        "{}\n0\n0\n{}\n{}\n{}\n",
        t.pixel_width,
        t.pixel_height,
        t.center_x(0),
        t.center_y(0)
    )
}

fn save_png(img: &impl SavePng, grid: &Grid, path: &Path) -> Result<()> {
    img.save_png(path)?;
    std::fs::write(path.with_extension("pgw"), world_file(grid))?;
    Ok(())
}

trait SavePng {
    fn save_png(&self, path: &Path) -> Result<()>;
}

impl SavePng for RgbImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        Ok(self.save_with_format(path, ImageFormat::Png)?)
    }
}

impl SavePng for RgbaImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        Ok(self.save_with_format(path, ImageFormat::Png)?)
    }
}

/// Writes the colored label map to `path` with a `.pgw` world file beside it.
pub fn write_label_map(path: &Path, labels: &LabelRaster) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_png(&render_labels(labels), &labels.grid, path)
}

/// Writes `<id>_truth.png`, `<id>_pred.png` and `<id>_errors.png`, each with a
/// `.pgw` world file, and returns their paths.
pub fn write_maps(dir: &Path, scene_id: &str, pred: &LabelRaster, truth: &LabelRaster) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = ["truth", "pred", "errors"]
        .iter()
        .map(|k| dir.join(format!("{scene_id}_{k}.png")))
        .collect();
    save_png(&render_labels(truth), &truth.grid, &paths[0])?;
    save_png(&render_labels(pred), &pred.grid, &paths[1])?;
    save_png(&render_errors(pred, truth)?, &truth.grid, &paths[2])?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GeoTransform;

    fn raster(codes: Vec<u8>, w: usize) -> LabelRaster {
        let h = codes.len() / w;
        LabelRaster::new(Grid::new(w, h, GeoTransform::north_up(1000.0, 2000.0, 80.0)), codes).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_error_pixels() {
        let t = raster(vec![0, 1, 2, 3, 4, IGNORE], 3);
        let img = render_errors(&t, &t).unwrap();
        assert!(img.pixels().all(|p| p.0 == NO_ERROR_COLOR || p.0 == BLANK_COLOR));
        assert_eq!(img.get_pixel(2, 1).0, BLANK_COLOR);
    }

    #[test]
    fn one_flipped_pixel_is_one_error() {
        let t = raster(vec![0; 25], 5);
        let mut p = t.clone();
        p.codes[13] = 3;
        let img = render_errors(&p, &t).unwrap();
        assert_eq!(img.pixels().filter(|p| p.0 == ERROR_COLOR).count(), 1);
        assert_eq!(img.get_pixel(3, 2).0, ERROR_COLOR);
    }

    #[test]
    fn palette_is_fixed_and_distinct() {
        let labels = render_labels(&raster(vec![0, 1, 2, 3, 4, IGNORE], 6));
        let colors: Vec<[u8; 3]> = labels.pixels().map(|p| p.0).collect();
        assert_eq!(&colors[..5], &PALETTE);
        assert_eq!(colors[5], IGNORE_COLOR);
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(colors[i], colors[j]);
            }
        }
    }

    #[test]
    fn maps_and_world_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let t = raster(vec![0, 1, 2, 3], 2);
        let paths = write_maps(dir.path(), "2018-01", &t, &t).unwrap();
        for p in &paths {
            assert!(p.exists());
            let wf = std::fs::read_to_string(p.with_extension("pgw")).unwrap();
            assert_eq!(wf.lines().collect::<Vec<_>>(), vec!["80", "0", "0", "-80", "1040", "1960"]);
        }
        let back = image::open(&paths[1]).unwrap().to_rgb8();
        assert_eq!(back.get_pixel(1, 1).0, PALETTE[3]);
    }
}
