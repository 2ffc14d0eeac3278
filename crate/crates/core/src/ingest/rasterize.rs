//! Scanline rasterization of chart polygons onto a scene grid.
//!
//! A pixel belongs to a polygon when its center lies inside it or on its
//! boundary (even-odd rule across all rings, so holes are excluded).

use geo_types::{LineString, Polygon};

use crate::error::Result;
use crate::grid::{Grid, LabelRaster};
use crate::ice_labels::{dominant_type, ChartPolygon, IGNORE};

#[derive(Clone, Copy)]
struct Edge {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

fn ring_edges(ring: &LineString<f64>, out: &mut Vec<Edge>) {
    let pts = &ring.0;
    if pts.len() < 2 {
        return;
    }
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        if a == b {
            continue;
        }
        out.push(Edge {
            x1: a.x,
            y1: a.y,
            x2: b.x,
            y2: b.y,
        });
    }
}

fn polygon_edges(polygon: &Polygon<f64>) -> Vec<Edge> {
    let mut edges = Vec::new();
    ring_edges(polygon.exterior(), &mut edges);
    for hole in polygon.interiors() {
        ring_edges(hole, &mut edges);
    }
    edges
}

/// Calls `mark(row, col)` for every pixel whose center lies inside or on the
/// boundary of `polygon`. A pixel may be reported more than once.
pub fn for_each_covered_pixel(
    polygon: &Polygon<f64>,
    grid: &Grid,
    mut mark: impl FnMut(usize, usize),
) {
    let edges = polygon_edges(polygon);
    if edges.is_empty() || grid.is_empty() {
        return;
    }
    let t = &grid.transform;
    let (min_y, max_y) = edges.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, e| {
        (acc.0.min(e.y1.min(e.y2)), acc.1.max(e.y1.max(e.y2)))
    });

    // candidate rows from the polygon's y extent, widened by one for rounding
    let (r_a, r_b) = (
        (min_y - t.origin_y) / t.pixel_height - 0.5,
        (max_y - t.origin_y) / t.pixel_height - 0.5,
    );
    let r_lo = (r_a.min(r_b).floor() - 1.0).max(0.0) as usize;
    let r_hi = (r_a.max(r_b).ceil() + 1.0).min(grid.height as f64 - 1.0);
    if r_hi < 0.0 {
        return;
    }
    let r_hi = r_hi as usize;

    let mut crossings = Vec::new();
    for row in r_lo..=r_hi {
        let yc = t.center_y(row);
        if yc < min_y || yc > max_y {
            continue;
        }
        crossings.clear();
        for e in &edges {
            if (e.y1 > yc) != (e.y2 > yc) {
                crossings.push(e.x1 + (yc - e.y1) * (e.x2 - e.x1) / (e.y2 - e.y1));
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        for pair in crossings.chunks_exact(2) {
            mark_span(grid, row, pair[0], pair[1], &mut mark);
        }
        // boundary points the crossing parity misses: horizontal edges lying
        // on the scanline and vertices touching it from below
        for e in &edges {
            if e.y1 == yc && e.y2 == yc {
                mark_span(grid, row, e.x1.min(e.x2), e.x1.max(e.x2), &mut mark);
            } else if e.y1 == yc {
                mark_span(grid, row, e.x1, e.x1, &mut mark);
            } else if e.y2 == yc {
                mark_span(grid, row, e.x2, e.x2, &mut mark);
            }
        }
    }
}

/// Marks every column whose center x lies in `[xa, xb]`.
fn mark_span(grid: &Grid, row: usize, xa: f64, xb: f64, mark: &mut impl FnMut(usize, usize)) {
    let t = &grid.transform;
    let u_a = (xa - t.origin_x) / t.pixel_width - 0.5;
    let u_b = (xb - t.origin_x) / t.pixel_width - 0.5;
    let lo = (u_a.min(u_b).floor() - 1.0).max(0.0);
    let hi = (u_a.max(u_b).ceil() + 1.0).min(grid.width as f64 - 1.0);
    if hi < lo || !lo.is_finite() || !hi.is_finite() {
        return;
    }
    for col in lo as usize..=hi as usize {
        let xc = t.center_x(col);
        if xc >= xa && xc <= xb {
            mark(row, col);
        }
    }
}

/// Burns each polygon's dominant ice type into a raster on `grid`. Pixels
/// covered by no polygon keep the ignore value; where polygons overlap the
/// later polygon wins.
pub fn rasterize_labels(polygons: &[ChartPolygon], grid: &Grid) -> Result<LabelRaster> {
    let mut codes = vec![IGNORE; grid.len()];
    if polygons.is_empty() {
        log::warn!(
            "rasterizing an empty chart: the {}x{} label raster is all ignore",
            grid.height,
            grid.width
        );
    }
    for polygon in polygons {
        let code = dominant_type(polygon)?.code();
        for_each_covered_pixel(&polygon.geometry, grid, |r, c| {
            codes[r * grid.width + c] = code;
        });
    }
    LabelRaster::new(grid.clone(), codes)
}
