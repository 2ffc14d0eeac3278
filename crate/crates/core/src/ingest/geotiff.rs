//! Single-band GeoTIFF reading and writing.
//!
//! Georeferencing uses ModelPixelScale + ModelTiepoint (north-up only), the
//! projected CRS is read from / written to the GeoKeyDirectory, and nodata
//! travels in the GDAL nodata ASCII tag.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid, LabelRaster};
use crate::ice_labels::IGNORE;

const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const KEY_PROJECTED_CS_TYPE: u16 = 3072;

/// A decoded band, widened to `f32`.
#[derive(Clone, Debug)]
pub struct GeoRaster {
    pub grid: Grid,
    pub data: Vec<f32>,
    pub nodata: Option<f64>,
}

impl GeoRaster {
    /// True where the pixel is the declared nodata value or not finite.
    pub fn invalid_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| self.is_nodata(v)).collect()
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        if !v.is_finite() {
            return true;
        }
        match self.nodata {
            Some(nd) if nd.is_nan() => false,
            Some(nd) => v as f64 == nd || v == nd as f32,
            None => false,
        }
    }
}

fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_band(path: &Path) -> Result<GeoRaster> {
    let file = File::open(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let mut dec = Decoder::new(BufReader::new(file))?.with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions()?;
    match dec.colortype()? {
        ColorType::Gray(_) => {}
        other => {
            return Err(ingest_err(
                path,
                format!("expected a single-band raster, found {other:?}"),
            ))
        }
    }

    let scale = dec
        .find_tag(Tag::ModelPixelScaleTag)?
        .map(|v| v.into_f64_vec())
        .transpose()?
        .ok_or_else(|| ingest_err(path, "missing ModelPixelScale tag (not georeferenced)"))?;
    let tie = dec
        .find_tag(Tag::ModelTiepointTag)?
        .map(|v| v.into_f64_vec())
        .transpose()?
        .ok_or_else(|| ingest_err(path, "missing ModelTiepoint tag (not georeferenced)"))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(ingest_err(path, "truncated georeferencing tags"));
    }
    // tiepoint (i, j, k, x, y, z) pins raster pixel corner (i, j) to (x, y)
    let (sx, sy) = (scale[0], scale[1]);
    let transform = GeoTransform {
        origin_x: tie[3] - tie[0] * sx,
        origin_y: tie[4] + tie[1] * sy,
        pixel_width: sx,
        pixel_height: -sy,
    };

    let epsg = match dec.find_tag(Tag::GeoKeyDirectoryTag)? {
        Some(v) => parse_epsg(&v.into_u16_vec()?),
        None => None,
    };
    let nodata = match dec.find_tag(Tag::GdalNodata)? {
        Some(v) => {
            let s = v.into_string()?;
            let s = s.trim_matches(|c: char| c == '\0' || c.is_whitespace());
            Some(
                s.parse::<f64>()
                    .map_err(|_| ingest_err(path, format!("unparseable nodata value {s:?}")))?,
            )
        }
        None => None,
    };

    let data: Vec<f32> = match dec.read_image()? {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(ingest_err(path, "unsupported sample format")),
    };
    let grid = Grid {
        width: w as usize,
        height: h as usize,
        transform,
        epsg,
    };
    if data.len() != grid.len() {
        return Err(ingest_err(path, "pixel count does not match dimensions"));
    }
    Ok(GeoRaster { grid, data, nodata })
}

fn parse_epsg(keys: &[u16]) -> Option<u16> {
    if keys.len() < 4 {
        return None;
    }
    let n = keys[3] as usize;
    let mut geographic = None;
    for entry in keys[4..].chunks_exact(4).take(n) {
        // inline SHORT values only (tiff tag location 0)
        if entry[1] != 0 {
            continue;
        }
        match entry[0] {
            KEY_PROJECTED_CS_TYPE => return Some(entry[3]),
            KEY_GEOGRAPHIC_TYPE => geographic = Some(entry[3]),
            _ => {}
        }
    }
    geographic
}

fn geo_keys(epsg: Option<u16>) -> Vec<u16> {
    let mut keys = vec![1, 1, 0, 0];
    keys.extend([KEY_MODEL_TYPE, 0, 1, 1]);
    keys.extend([KEY_RASTER_TYPE, 0, 1, 1]);
    if let Some(code) = epsg {
        keys.extend([KEY_PROJECTED_CS_TYPE, 0, 1, code]);
    }
    keys[3] = ((keys.len() - 4) / 4) as u16;
    keys
}

macro_rules! write_georeferenced {
    ($path:expr, $grid:expr, $data:expr, $nodata:expr, $color:ty) => {{
        let grid: &Grid = $grid;
        if $data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} grid",
                $data.len(),
                grid.height,
                grid.width
            )));
        }
        let file = BufWriter::new(File::create($path)?);
        let mut enc = TiffEncoder::new(file)?;
        let mut image = enc.new_image::<$color>(grid.width as u32, grid.height as u32)?;
        let t = &grid.transform;
        let dir = image.encoder();
        dir.write_tag(
            Tag::ModelPixelScaleTag,
            &[t.pixel_width, -t.pixel_height, 0.0][..],
        )?;
        dir.write_tag(
            Tag::ModelTiepointTag,
            &[0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0][..],
        )?;
        dir.write_tag(Tag::GeoKeyDirectoryTag, &geo_keys(grid.epsg)[..])?;
        if let Some(nd) = $nodata {
            dir.write_tag(Tag::GdalNodata, &*format!("{}", nd))?;
        }
        image.write_data($data)?;
        Ok(())
    }};
}

pub fn write_f32(path: &Path, grid: &Grid, data: &[f32], nodata: Option<f32>) -> Result<()> {
    write_georeferenced!(path, grid, data, nodata, colortype::Gray32Float)
}

pub fn write_u8(path: &Path, grid: &Grid, data: &[u8], nodata: Option<u8>) -> Result<()> {
    write_georeferenced!(path, grid, data, nodata, colortype::Gray8)
}

pub fn write_labels(path: &Path, labels: &LabelRaster) -> Result<()> {
    write_u8(path, &labels.grid, &labels.codes, Some(IGNORE))
}

/// Reads a uint8 label GeoTIFF; any declared nodata value maps to the ignore code.
pub fn read_labels(path: &Path) -> Result<LabelRaster> {
    let band = read_band(path)?;
    let codes = band
        .data
        .iter()
        .map(|&v| {
            if band.is_nodata(v) {
                IGNORE
            } else {
                v as u8
            }
        })
        .collect();
    LabelRaster::new(band.grid, codes).map_err(|e| ingest_err(path, e.to_string()))
}
