//! Ice-chart polygons as GeoJSON feature collections.
//!
//! Feature properties: `ct`, `sa`, `ca`, `sb`, `cb` (integer tenths and class
//! codes, second type optional) and `is_water`.

use std::path::Path;

use geo_types::{Coord, LineString, Polygon};
use geojson::{Feature, FeatureCollection, GeoJson, Geometry, JsonObject, JsonValue, Value};

use crate::error::{Error, Result};
use crate::ice_labels::{ChartPolygon, IceClass};

pub fn read_charts(path: &Path) -> Result<Vec<ChartPolygon>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_charts(&text, path)
}

pub fn parse_charts(text: &str, path: &Path) -> Result<Vec<ChartPolygon>> {
    let schema = |index: usize, reason: String| Error::ChartSchema {
        path: path.to_path_buf(),
        index,
        reason,
    };
    let collection = match text.parse::<GeoJson>().map_err(Box::new)? {
        GeoJson::FeatureCollection(fc) => fc,
        _ => {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                reason: "expected a GeoJSON FeatureCollection".into(),
            })
        }
    };
    let mut out = Vec::with_capacity(collection.features.len());
    for (index, feature) in collection.features.iter().enumerate() {
        let props = feature
            .properties
            .as_ref()
            .ok_or_else(|| schema(index, "feature has no properties".into()))?;
        let attrs = parse_attributes(props).map_err(|r| schema(index, r))?;
        let geometry = feature
            .geometry
            .as_ref()
            .ok_or_else(|| schema(index, "feature has no geometry".into()))?;
        let polygons = match &geometry.value {
            Value::Polygon(rings) => vec![to_polygon(rings).map_err(|r| schema(index, r))?],
            Value::MultiPolygon(parts) => parts
                .iter()
                .map(|rings| to_polygon(rings))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|r| schema(index, r))?,
            other => {
                return Err(schema(
                    index,
                    format!("unsupported geometry type {}", other.type_name()),
                ))
            }
        };
        for geometry in polygons {
            let polygon = ChartPolygon {
                geometry,
                ..attrs.clone()
            };
            polygon
                .validate()
                .map_err(|e| schema(index, e.to_string()))?;
            out.push(polygon);
        }
    }
    Ok(out)
}

fn to_polygon(rings: &[Vec<Vec<f64>>]) -> std::result::Result<Polygon<f64>, String> {
    let mut rings = rings.iter().map(|ring| {
        if ring.len() < 4 {
            return Err(format!("ring with {} positions (need >= 4)", ring.len()));
        }
        ring.iter()
            .map(|p| match p.as_slice() {
                [x, y, ..] => Ok(Coord { x: *x, y: *y }),
                _ => Err("position with fewer than 2 coordinates".to_string()),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(LineString::new)
    });
    let exterior = rings.next().ok_or("polygon without rings")??;
    let interiors = rings.collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Polygon::new(exterior, interiors))
}

fn int_prop(props: &JsonObject, key: &str) -> std::result::Result<Option<u8>, String> {
    match props.get(key) {
        None | Some(JsonValue::Null) => Ok(None),
        Some(JsonValue::Number(n)) => match n.as_u64() {
            Some(v) if v <= u8::MAX as u64 => Ok(Some(v as u8)),
            _ => Err(format!("`{key}` must be a non-negative integer, got {n}")),
        },
        Some(other) => Err(format!("`{key}` must be an integer, got {other}")),
    }
}

fn class_prop(props: &JsonObject, key: &str) -> std::result::Result<Option<IceClass>, String> {
    int_prop(props, key)?
        .map(|code| IceClass::from_code(code).ok_or(format!("`{key}` = {code} is not a class code")))
        .transpose()
}

fn parse_attributes(props: &JsonObject) -> std::result::Result<ChartPolygon, String> {
    let is_water = match props.get("is_water") {
        None | Some(JsonValue::Null) => false,
        Some(JsonValue::Bool(b)) => *b,
        Some(other) => return Err(format!("`is_water` must be a boolean, got {other}")),
    };
    Ok(ChartPolygon {
        geometry: Polygon::new(LineString::new(vec![]), vec![]),
        ct: int_prop(props, "ct")?.unwrap_or(0),
        sa: class_prop(props, "sa")?,
        ca: int_prop(props, "ca")?,
        sb: class_prop(props, "sb")?,
        cb: int_prop(props, "cb")?,
        is_water,
    })
}

fn ring_positions(ring: &LineString<f64>) -> Vec<Vec<f64>> {
    let mut positions: Vec<Vec<f64>> = ring.0.iter().map(|c| vec![c.x, c.y]).collect();
    if positions.first() != positions.last() {
        if let Some(first) = positions.first().cloned() {
            positions.push(first);
        }
    }
    positions
}

pub fn charts_to_geojson(polygons: &[ChartPolygon]) -> GeoJson {
    let features = polygons
        .iter()
        .map(|p| {
            let mut rings = vec![ring_positions(p.geometry.exterior())];
            rings.extend(p.geometry.interiors().iter().map(ring_positions));
            let mut props = JsonObject::new();
            props.insert("ct".into(), p.ct.into());
            props.insert("is_water".into(), p.is_water.into());
            for (key, value) in [
                ("sa", p.sa.map(IceClass::code)),
                ("ca", p.ca),
                ("sb", p.sb.map(IceClass::code)),
                ("cb", p.cb),
            ] {
                if let Some(v) = value {
                    props.insert(key.into(), v.into());
                }
            }
            Feature {
                bbox: None,
                geometry: Some(Geometry::new(Value::Polygon(rings))),
                id: None,
                properties: Some(props),
                foreign_members: None,
            }
        })
        .collect();
    GeoJson::FeatureCollection(FeatureCollection {
        bbox: None,
        features,
        foreign_members: None,
    })
}

pub fn write_charts(path: &Path, polygons: &[ChartPolygon]) -> Result<()> {
    std::fs::write(path, charts_to_geojson(polygons).to_string())?;
    Ok(())
}
