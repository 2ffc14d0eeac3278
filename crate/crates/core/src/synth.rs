//! Synthetic SAR-like scenes with matching ice charts.
//!
//! Every region is filled with Gaussian-in-dB HH/HV values drawn from its
//! class statistics; the incidence band is a linear west-to-east ramp. The
//! chart polygons are the regions themselves, so rasterizing them yields the
//! ground truth exactly.

use std::path::Path;

use geo_types::{Coord, LineString, Polygon};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid, LabelRaster};
use crate::ice_labels::{ChartPolygon, IceClass, IGNORE};
use crate::ingest::rasterize::for_each_covered_pixel;
use crate::ingest::{rasterize_labels, write_charts, SceneStack, BAND_NODATA, TARGET_PIXEL_SIZE};

/// Backscatter distribution of one class, in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub hh_mean: f64,
    pub hh_std: f64,
    pub hv_mean: f64,
    pub hv_std: f64,
}

/// Default per-class statistics, indexed by class code. Adjacent classes are
/// 4 sigma apart in HH and 5 sigma apart in HV.
pub const DEFAULT_STATS: [ClassStats; IceClass::COUNT] = [
    ClassStats { hh_mean: -22.0, hh_std: 1.0, hv_mean: -32.0, hv_std: 1.0 },
    ClassStats { hh_mean: -18.0, hh_std: 1.0, hv_mean: -27.0, hv_std: 1.0 },
    ClassStats { hh_mean: -14.0, hh_std: 1.0, hv_mean: -22.0, hv_std: 1.0 },
    ClassStats { hh_mean: -10.0, hh_std: 1.0, hv_mean: -17.0, hv_std: 1.0 },
    ClassStats { hh_mean: -6.0, hh_std: 1.0, hv_mean: -12.0, hv_std: 1.0 },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRegion {
    /// Polygon in projected meters.
    pub polygon: Polygon<f64>,
    pub class: IceClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub regions: Vec<SynthRegion>,
    pub band_stats: [ClassStats; IceClass::COUNT],
    /// Incidence angle at the western and eastern edges, degrees.
    pub incidence_ramp: (f64, f64),
    pub origin: (f64, f64),
    pub epsg: u16,
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub stack: SceneStack,
    pub charts: Vec<ChartPolygon>,
    pub truth: LabelRaster,
}

impl SynthScene {
    /// Writes `<id>_{hh,hv,ia}.tif` and `<id>_chart.geojson` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.stack.write(dir)?;
        write_charts(&dir.join(format!("{}_chart.geojson", self.stack.scene_id)), &self.charts)
    }
}

impl SynthSpec {
    pub fn grid(&self) -> Grid {
        Grid::new(
            self.width,
            self.height,
            GeoTransform::north_up(self.origin.0, self.origin.1, TARGET_PIXEL_SIZE),
        )
        .with_epsg(self.epsg)
    }

    /// Five slanted vertical strips, one per class, in a seed-dependent
    /// order. The strips tile the whole scene.
    pub fn strips(scene_id: &str, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut classes = IceClass::ALL.to_vec();
        classes.shuffle(&mut rng);
        let (x0, y0) = (500_000.0, 8_000_000.0);
        let px = TARGET_PIXEL_SIZE;
        let (w, h) = (width as f64 * px, height as f64 * px);
        let n = classes.len();
        // boundary k runs from (top[k], y0) to (bottom[k], y0 - h)
        let jitter = w / n as f64 * 0.25;
        let mut top = vec![x0 - w; n + 1];
        let mut bottom = vec![x0 - w; n + 1];
        for k in 1..n {
            let base = x0 + w * k as f64 / n as f64;
            top[k] = base + rng.gen_range(-jitter..jitter);
            bottom[k] = base + rng.gen_range(-jitter..jitter);
        }
        top[n] = x0 + 2.0 * w;
        bottom[n] = x0 + 2.0 * w;
        let regions = classes
            .into_iter()
            .enumerate()
            .map(|(i, class)| {
                let ring = vec![
                    Coord { x: top[i], y: y0 + px },
                    Coord { x: top[i + 1], y: y0 + px },
                    Coord { x: bottom[i + 1], y: y0 - h - px },
                    Coord { x: bottom[i], y: y0 - h - px },
                    Coord { x: top[i], y: y0 + px },
                ];
                SynthRegion {
                    polygon: Polygon::new(LineString::new(ring), vec![]),
                    class,
                }
            })
            .collect();
        Self::with_regions(scene_id, height, width, seed, regions)
    }

    /// Voronoi cells around a jittered `per_side` x `per_side` grid of sites.
    /// Every class gets at least one cell when there are five or more; the
    /// rest are drawn so that class carries little information about position.
    pub fn cells(scene_id: &str, height: usize, width: usize, seed: u64, per_side: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x0, y0) = (500_000.0, 8_000_000.0);
        let px = TARGET_PIXEL_SIZE;
        let (w, h) = (width as f64 * px, height as f64 * px);
        let n = per_side.max(1);
        let (cw, ch) = (w / n as f64, h / n as f64);
        let sites: Vec<(f64, f64)> = (0..n * n)
            .map(|k| {
                let (i, j) = ((k / n) as f64, (k % n) as f64);
                (
                    x0 + (j + rng.gen_range(0.15..0.85)) * cw,
                    y0 - (i + rng.gen_range(0.15..0.85)) * ch,
                )
            })
            .collect();
        let mut classes: Vec<IceClass> = IceClass::ALL.iter().copied().cycle().take(sites.len()).collect();
        classes.shuffle(&mut rng);
        let frame = vec![
            (x0 - px, y0 + px),
            (x0 + w + px, y0 + px),
            (x0 + w + px, y0 - h - px),
            (x0 - px, y0 - h - px),
        ];
        let regions = sites
            .iter()
            .zip(classes)
            .map(|(&site, class)| {
                let mut cell = frame.clone();
                for &other in &sites {
                    if other != site {
                        cell = clip_to_bisector(&cell, site, other);
                    }
                }
                let mut ring: Vec<Coord> = cell.iter().map(|&(x, y)| Coord { x, y }).collect();
                ring.push(ring[0]);
                SynthRegion {
                    polygon: Polygon::new(LineString::new(ring), vec![]),
                    class,
                }
            })
            .collect();
        Self::with_regions(scene_id, height, width, seed, regions)
    }

    fn with_regions(scene_id: &str, height: usize, width: usize, seed: u64, regions: Vec<SynthRegion>) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            height,
            width,
            seed,
            regions,
            band_stats: DEFAULT_STATS,
            incidence_ramp: (20.0, 46.0),
            origin: (500_000.0, 8_000_000.0),
            epsg: 3996,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SynthSpec(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty scene {}x{}", self.height, self.width));
        }
        if self.regions.is_empty() {
            return bad("no regions".into());
        }
        let (a, b) = self.incidence_ramp;
        if !a.is_finite() || !b.is_finite() {
            return bad("incidence ramp must be finite".into());
        }
        for s in &self.band_stats {
            if !(s.hh_std > 0.0 && s.hv_std > 0.0 && s.hh_mean.is_finite() && s.hv_mean.is_finite()) {
                return bad(format!("invalid class statistics {s:?}"));
            }
        }
        let mut used: Vec<IceClass> = self.regions.iter().map(|r| r.class).collect();
        used.sort();
        used.dedup();
        for (i, &p) in used.iter().enumerate() {
            for &q in &used[i + 1..] {
                let (s, t) = (self.band_stats[p.code() as usize], self.band_stats[q.code() as usize]);
                let hh = (s.hh_mean - t.hh_mean).abs() / s.hh_std.max(t.hh_std);
                let hv = (s.hv_mean - t.hv_mean).abs() / s.hv_std.max(t.hv_std);
                if hh.max(hv) < 2.0 {
                    return bad(format!("classes {p} and {q} are less than 2 sigma apart"));
                }
            }
        }
        Ok(())
    }
}

/// The part of convex `poly` closer to `site` than to `other`.
fn clip_to_bisector(poly: &[(f64, f64)], site: (f64, f64), other: (f64, f64)) -> Vec<(f64, f64)> {
    let (dx, dy) = (other.0 - site.0, other.1 - site.1);
    let (mx, my) = ((site.0 + other.0) / 2.0, (site.1 + other.1) / 2.0);
    let side = |p: (f64, f64)| (p.0 - mx) * dx + (p.1 - my) * dy;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for (k, &a) in poly.iter().enumerate() {
        let b = poly[(k + 1) % poly.len()];
        let (fa, fb) = (side(a), side(b));
        if fa <= 0.0 {
            out.push(a);
        }
        if (fa <= 0.0) != (fb <= 0.0) {
            let t = fa / (fa - fb);
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    out
}

fn chart_polygon(region: &SynthRegion) -> ChartPolygon {
    let geometry = region.polygon.clone();
    match region.class {
        IceClass::Water => ChartPolygon::water(geometry),
        IceClass::NewIce => ChartPolygon::single(geometry, IceClass::NewIce, 9),
        // oldest type dominant, a younger type in lower concentration
        older => ChartPolygon::mixed(
            geometry,
            (older, 7),
            (IceClass::from_code(older.code() - 1).expect("younger class"), 2),
        ),
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let grid = spec.grid();
    let mut coverage = vec![0u8; grid.len()];
    for (i, region) in spec.regions.iter().enumerate() {
        let mut seen = vec![false; grid.len()];
        for_each_covered_pixel(&region.polygon, &grid, |r, c| seen[r * grid.width + c] = true);
        for (count, s) in coverage.iter_mut().zip(seen) {
            if s {
                *count += 1;
                if *count > 1 {
                    return Err(Error::SynthSpec(format!(
                        "region {i} ({}) overlaps an earlier region",
                        region.class
                    )));
                }
            }
        }
    }

    let charts: Vec<ChartPolygon> = spec.regions.iter().map(chart_polygon).collect();
    let truth = rasterize_labels(&charts, &grid)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = grid.len();
    let (mut hh, mut hv) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut nodata_mask = Vec::with_capacity(n);
    for &code in &truth.codes {
        if code == IGNORE {
            hh.push(BAND_NODATA);
            hv.push(BAND_NODATA);
            nodata_mask.push(true);
            continue;
        }
        let s = spec.band_stats[code as usize];
        let (a, b): (f64, f64) = (std_normal.sample(&mut rng), std_normal.sample(&mut rng));
        hh.push((s.hh_mean + s.hh_std * a) as f32);
        hv.push((s.hv_mean + s.hv_std * b) as f32);
        nodata_mask.push(false);
    }
    let (west, east) = spec.incidence_ramp;
    let incidence = (0..n)
        .map(|i| {
            let col = i % grid.width;
            let t = if grid.width > 1 { col as f64 / (grid.width - 1) as f64 } else { 0.0 };
            (west + (east - west) * t) as f32
        })
        .collect();

    Ok(SynthScene {
        stack: SceneStack {
            scene_id: spec.scene_id.clone(),
            grid,
            hh,
            hv,
            incidence,
            nodata_mask,
        },
        charts,
        truth,
    })
}

/// Writes `count` Voronoi-cell scenes `YYYY-01 ..` into `dir` (months wrap
/// into the following years).
/// Cells per scene side in [`write_dataset`].
pub const DATASET_CELLS_PER_SIDE: usize = 4;

pub fn write_dataset(dir: &Path, year: u32, count: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{}-{:02}", year + (i / 12) as u32, i % 12 + 1);
        let spec = SynthSpec::cells(&id, size, size, seed.wrapping_mul(1000).wrapping_add(i as u64), DATASET_CELLS_PER_SIDE);
        generate(&spec)?.write(dir)?;
        ids.push(id);
    }
    Ok(ids)
}
