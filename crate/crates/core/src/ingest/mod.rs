//! Scene and chart ingestion: band loading onto the 80 m grid, fixed-range
//! normalization, and label rasterization.

pub mod charts;
pub mod geotiff;
pub mod rasterize;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{crop, GeoTransform, Grid, Window};

pub use charts::{read_charts, write_charts};
pub use geotiff::{read_band, read_labels, write_f32, write_labels, GeoRaster};
pub use rasterize::rasterize_labels;

/// Pixel size every scene is resampled to, in meters.
pub const TARGET_PIXEL_SIZE: f64 = 80.0;

/// Nodata value written into float bands.
pub const BAND_NODATA: f32 = -9999.0;

/// Co-registered HH / HV backscatter (dB) and incidence angle (degrees).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneStack {
    pub scene_id: String,
    pub grid: Grid,
    pub hh: Vec<f32>,
    pub hv: Vec<f32>,
    pub incidence: Vec<f32>,
    pub nodata_mask: Vec<bool>,
}

impl SceneStack {
    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn pixel_size(&self) -> f64 {
        self.grid.transform.pixel_width.abs()
    }

    pub fn window(&self, window: &Window) -> SceneStack {
        let w = self.grid.width;
        SceneStack {
            scene_id: self.scene_id.clone(),
            grid: self.grid.window(window),
            hh: crop(&self.hh, w, window),
            hv: crop(&self.hv, w, window),
            incidence: crop(&self.incidence, w, window),
            nodata_mask: crop(&self.nodata_mask, w, window),
        }
    }

    /// Writes `<dir>/<scene_id>_{hh,hv,ia}.tif`, nodata pixels set to [`BAND_NODATA`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (suffix, band) in [("hh", &self.hh), ("hv", &self.hv), ("ia", &self.incidence)] {
            let data: Vec<f32> = band
                .iter()
                .zip(&self.nodata_mask)
                .map(|(&v, &m)| if m { BAND_NODATA } else { v })
                .collect();
            let path = dir.join(format!("{}_{suffix}.tif", self.scene_id));
            write_f32(&path, &self.grid, &data, Some(BAND_NODATA))?;
        }
        Ok(())
    }
}

/// Scene id from a file named `<id>_<suffix>.<ext>`.
pub fn scene_id_from_path(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match stem.rsplit_once('_') {
        Some((id, _)) => id.to_string(),
        None => stem,
    }
}

/// Loads the three bands of a scene onto a common 80 m grid. The HH raster
/// defines the extent; HV and incidence are bilinearly resampled onto it.
pub fn load_scene(path_hh: &Path, path_hv: &Path, path_incidence: &Path) -> Result<SceneStack> {
    let hh = read_band(path_hh)?;
    let target = target_grid(&hh.grid, TARGET_PIXEL_SIZE);
    let (hh_data, hh_mask) = resample_bilinear(&hh, &target);

    let mut bands = Vec::with_capacity(2);
    for path in [path_hv, path_incidence] {
        let band = read_band(path)?;
        check_compatible(&hh.grid, &band.grid, path)?;
        bands.push(resample_bilinear(&band, &target));
    }
    let (ia_data, ia_mask) = bands.pop().unwrap();
    let (hv_data, hv_mask) = bands.pop().unwrap();

    let nodata_mask = hh_mask
        .iter()
        .zip(&hv_mask)
        .zip(&ia_mask)
        .map(|((&a, &b), &c)| a || b || c)
        .collect();
    Ok(SceneStack {
        scene_id: scene_id_from_path(path_hh),
        grid: target,
        hh: hh_data,
        hv: hv_data,
        incidence: ia_data,
        nodata_mask,
    })
}

fn check_compatible(reference: &Grid, other: &Grid, path: &Path) -> Result<()> {
    if let (Some(a), Some(b)) = (reference.epsg, other.epsg) {
        if a != b {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                reason: format!("projection EPSG:{b} differs from the HH raster's EPSG:{a}"),
            });
        }
    }
    let (ax0, ay0, ax1, ay1) = reference.bounds();
    let (bx0, by0, bx1, by1) = other.bounds();
    if ax0.max(bx0) >= ax1.min(bx1) || ay0.max(by0) >= ay1.min(by1) {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            reason: "raster extent does not overlap the HH raster".into(),
        });
    }
    Ok(())
}

/// Grid with the same extent and origin as `src` and the given pixel size.
pub fn target_grid(src: &Grid, pixel_size: f64) -> Grid {
    let t = &src.transform;
    let width = ((src.width as f64 * t.pixel_width.abs()) / pixel_size).round() as usize;
    let height = ((src.height as f64 * t.pixel_height.abs()) / pixel_size).round() as usize;
    Grid {
        width: width.max(1),
        height: height.max(1),
        transform: GeoTransform {
            origin_x: t.origin_x,
            origin_y: t.origin_y,
            pixel_width: pixel_size.copysign(t.pixel_width),
            pixel_height: pixel_size.copysign(t.pixel_height),
        },
        epsg: src.epsg,
    }
}

/// Bilinear resampling onto `target`; returns values and a nodata mask. A
/// target pixel is nodata when it falls outside the source extent or any tap
/// with nonzero weight is nodata.
pub fn resample_bilinear(src: &GeoRaster, target: &Grid) -> (Vec<f32>, Vec<bool>) {
    let invalid = src.invalid_mask();
    if src.grid.width == target.width
        && src.grid.height == target.height
        && src.grid.transform == target.transform
    {
        let data = src
            .data
            .iter()
            .zip(&invalid)
            .map(|(&v, &m)| if m { 0.0 } else { v })
            .collect();
        return (data, invalid);
    }

    let (sw, sh) = (src.grid.width, src.grid.height);
    let st = &src.grid.transform;
    let mut data = vec![0.0f32; target.len()];
    let mut mask = vec![true; target.len()];
    for row in 0..target.height {
        let y = target.transform.center_y(row);
        for col in 0..target.width {
            let x = target.transform.center_x(col);
            let (u, v) = st.world_to_pixel(x, y);
            if u < -0.5 || v < -0.5 || u > sw as f64 - 0.5 || v > sh as f64 - 0.5 {
                continue;
            }
            let u = u.clamp(0.0, (sw - 1) as f64);
            let v = v.clamp(0.0, (sh - 1) as f64);
            let (c0, r0) = (u.floor() as usize, v.floor() as usize);
            let (c1, r1) = ((c0 + 1).min(sw - 1), (r0 + 1).min(sh - 1));
            let (fu, fv) = ((u - c0 as f64) as f32, (v - r0 as f64) as f32);
            let idx = |r: usize, c: usize| r * sw + c;
            let taps = [
                (idx(r0, c0), fu < 1.0 && fv < 1.0),
                (idx(r0, c1), fu > 0.0 && fv < 1.0),
                (idx(r1, c0), fu < 1.0 && fv > 0.0),
                (idx(r1, c1), fu > 0.0 && fv > 0.0),
            ];
            if taps.iter().any(|&(i, used)| used && invalid[i]) {
                continue;
            }
            let p = |i: usize| src.data[i];
            let top = p(taps[0].0) + fu * (p(taps[1].0) - p(taps[0].0));
            let bottom = p(taps[2].0) + fu * (p(taps[3].0) - p(taps[2].0));
            let out = row * target.width + col;
            data[out] = top + fv * (bottom - top);
            mask[out] = false;
        }
    }
    (data, mask)
}

/// Clip-and-scale range mapping `[lo, hi]` onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRange {
    pub lo: f32,
    pub hi: f32,
}

impl BandRange {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    pub fn apply(&self, v: f32) -> f32 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    pub fn invert(&self, n: f32) -> f32 {
        self.lo + n * (self.hi - self.lo)
    }
}

pub const HH_RANGE_DB: BandRange = BandRange::new(-30.0, 0.0);
pub const HV_RANGE_DB: BandRange = BandRange::new(-35.0, -5.0);
pub const INCIDENCE_RANGE_DEG: BandRange = BandRange::new(19.0, 47.0);

/// Model input: three bands in `[0, 1]`, band-major (HH, HV, incidence).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedStack {
    pub scene_id: String,
    pub grid: Grid,
    pub bands: Vec<f32>,
    pub nodata_mask: Vec<bool>,
}

impl NormalizedStack {
    pub const CHANNELS: usize = 3;

    pub fn band(&self, index: usize) -> &[f32] {
        let n = self.grid.len();
        &self.bands[index * n..(index + 1) * n]
    }

    pub fn window(&self, window: &Window) -> NormalizedStack {
        let w = self.grid.width;
        let mut bands = Vec::with_capacity(Self::CHANNELS * window.area());
        for b in 0..Self::CHANNELS {
            bands.extend(crop(self.band(b), w, window));
        }
        NormalizedStack {
            scene_id: self.scene_id.clone(),
            grid: self.grid.window(window),
            bands,
            nodata_mask: crop(&self.nodata_mask, w, window),
        }
    }
}

/// Fixed-range normalization; nodata pixels become 0.
pub fn normalize(stack: &SceneStack) -> NormalizedStack {
    let mut bands = Vec::with_capacity(3 * stack.grid.len());
    for (band, range) in [
        (&stack.hh, HH_RANGE_DB),
        (&stack.hv, HV_RANGE_DB),
        (&stack.incidence, INCIDENCE_RANGE_DEG),
    ] {
        bands.extend(
            band.iter()
                .zip(&stack.nodata_mask)
                .map(|(&v, &m)| if m { 0.0 } else { range.apply(v) }),
        );
    }
    NormalizedStack {
        scene_id: stack.scene_id.clone(),
        grid: stack.grid.clone(),
        bands,
        nodata_mask: stack.nodata_mask.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_band(dir: &Path, name: &str, grid: &Grid, data: &[f32]) -> std::path::PathBuf {
        let p = dir.join(name);
        write_f32(&p, grid, data, Some(BAND_NODATA)).unwrap();
        p
    }

    fn stack_of(hh: f32, hv: f32, ia: f32) -> SceneStack {
        SceneStack {
            scene_id: "2018-01".into(),
            grid: Grid::new(1, 1, GeoTransform::north_up(0.0, 80.0, 80.0)),
            hh: vec![hh],
            hv: vec![hv],
            incidence: vec![ia],
            nodata_mask: vec![false],
        }
    }

    #[test]
    fn aligned_rasters_load_without_mask() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(128, 128, GeoTransform::north_up(0.0, 128.0 * 80.0, 80.0)).with_epsg(3413);
        let ones = vec![-10.0f32; g.len()];
        let hh = write_band(dir.path(), "2018-01_hh.tif", &g, &ones);
        let hv = write_band(dir.path(), "2018-01_hv.tif", &g, &ones);
        let ia = write_band(dir.path(), "2018-01_ia.tif", &g, &vec![30.0; g.len()]);
        let s = load_scene(&hh, &hv, &ia).unwrap();
        assert_eq!((s.height(), s.width()), (128, 128));
        assert_eq!(s.scene_id, "2018-01");
        assert!(s.nodata_mask.iter().all(|&m| !m));
        assert_eq!(s.pixel_size(), 80.0);
        // bit-reproducible
        assert_eq!(s, load_scene(&hh, &hv, &ia).unwrap());
    }

    #[test]
    fn nodata_corner_is_masked_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(16, 16, GeoTransform::north_up(0.0, 16.0 * 80.0, 80.0));
        let mut hv_data = vec![-20.0f32; g.len()];
        for r in 0..4 {
            for c in 0..5 {
                hv_data[r * 16 + c] = BAND_NODATA;
            }
        }
        let hh = write_band(dir.path(), "s_hh.tif", &g, &vec![-10.0; g.len()]);
        let hv = write_band(dir.path(), "s_hv.tif", &g, &hv_data);
        let ia = write_band(dir.path(), "s_ia.tif", &g, &vec![30.0; g.len()]);
        let s = load_scene(&hh, &hv, &ia).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(s.nodata_mask[r * 16 + c], r < 4 && c < 5);
            }
        }
    }

    #[test]
    fn coarse_input_is_upsampled_to_80m() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(32, 24, GeoTransform::north_up(1000.0, 50_000.0, 160.0));
        let hh = write_band(dir.path(), "c_hh.tif", &g, &vec![-12.5; g.len()]);
        let hv = write_band(dir.path(), "c_hv.tif", &g, &vec![-21.0; g.len()]);
        let ia = write_band(dir.path(), "c_ia.tif", &g, &vec![33.0; g.len()]);
        let s = load_scene(&hh, &hv, &ia).unwrap();
        assert!((s.width() as i64 - 64).abs() <= 1);
        assert!((s.height() as i64 - 48).abs() <= 1);
        assert_eq!(s.pixel_size(), 80.0);
        // a constant field must stay constant under resampling
        assert!(s.nodata_mask.iter().all(|&m| !m));
        assert!(s.hh.iter().all(|&v| v == -12.5));
        assert!(s.incidence.iter().all(|&v| v == 33.0));
    }

    #[test]
    fn projection_mismatch_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(4, 4, GeoTransform::north_up(0.0, 320.0, 80.0)).with_epsg(3413);
        let other = g.clone().with_epsg(3996);
        let hh = write_band(dir.path(), "p_hh.tif", &g, &[0.0; 16]);
        let hv = write_band(dir.path(), "p_hv.tif", &other, &[0.0; 16]);
        let ia = write_band(dir.path(), "p_ia.tif", &g, &[30.0; 16]);
        let err = load_scene(&hh, &hv, &ia).unwrap_err();
        assert!(err.to_string().contains("p_hv.tif"), "{err}");
    }

    #[test]
    fn disjoint_extent_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(4, 4, GeoTransform::north_up(0.0, 320.0, 80.0));
        let far = Grid::new(4, 4, GeoTransform::north_up(1e6, 320.0, 80.0));
        let hh = write_band(dir.path(), "d_hh.tif", &g, &[0.0; 16]);
        let hv = write_band(dir.path(), "d_hv.tif", &g, &[0.0; 16]);
        let ia = write_band(dir.path(), "d_ia.tif", &far, &[30.0; 16]);
        let err = load_scene(&hh, &hv, &ia).unwrap_err();
        assert!(err.to_string().contains("d_ia.tif"), "{err}");
    }

    #[test]
    fn normalization_endpoints_and_clipping() {
        let n = normalize(&stack_of(-30.0, -35.0, 33.0));
        assert_eq!(n.bands, vec![0.0, 0.0, 0.5]);
        let n = normalize(&stack_of(0.0, -5.0, 47.0));
        assert_eq!(n.bands, vec![1.0, 1.0, 1.0]);
        let n = normalize(&stack_of(-40.0, 10.0, 5.0));
        assert_eq!(n.bands, vec![0.0, 1.0, 0.0]);
        let mut s = stack_of(-10.0, -10.0, 30.0);
        s.nodata_mask[0] = true;
        assert_eq!(normalize(&s).bands, vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn normalize_is_stable_through_inverse(hh in -45.0f32..10.0, hv in -45.0f32..5.0, ia in 10.0f32..55.0) {
            let once = normalize(&stack_of(hh, hv, ia));
            let back = stack_of(
                HH_RANGE_DB.invert(once.bands[0]),
                HV_RANGE_DB.invert(once.bands[1]),
                INCIDENCE_RANGE_DEG.invert(once.bands[2]),
            );
            let twice = normalize(&back);
            for (a, b) in once.bands.iter().zip(&twice.bands) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
