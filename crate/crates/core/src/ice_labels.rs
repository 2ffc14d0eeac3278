//! Ice-type taxonomy and the dominant-type rule applied to chart polygons.

use std::collections::BTreeMap;
use std::fmt;

use geo_types::Polygon;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelRaster;

/// Label value for pixels excluded from losses and metrics (land, unlabeled ocean, nodata).
pub const IGNORE: u8 = 255;

/// The closed set of target categories. Codes increase with ice development
/// stage, so `Ord` on this type orders by age.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum IceClass {
    Water = 0,
    NewIce = 1,
    YoungIce = 2,
    FirstYearIce = 3,
    OldIce = 4,
}

impl IceClass {
    pub const COUNT: usize = 5;
    pub const ALL: [IceClass; 5] = [
        IceClass::Water,
        IceClass::NewIce,
        IceClass::YoungIce,
        IceClass::FirstYearIce,
        IceClass::OldIce,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            IceClass::Water => "Water",
            IceClass::NewIce => "NewIce",
            IceClass::YoungIce => "YoungIce",
            IceClass::FirstYearIce => "FirstYearIce",
            IceClass::OldIce => "OldIce",
        }
    }

    pub fn is_ice(self) -> bool {
        self != IceClass::Water
    }
}

impl fmt::Display for IceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<u8> for IceClass {
    type Error = Error;

    fn try_from(code: u8) -> Result<Self> {
        Self::from_code(code).ok_or(Error::InvalidTarget(code))
    }
}

/// One ice-chart polygon with its concentration attributes (tenths).
///
/// `sa`/`ca` describe the oldest ice present, `sb`/`cb` the second oldest.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPolygon {
    pub geometry: Polygon<f64>,
    pub ct: u8,
    pub sa: Option<IceClass>,
    pub ca: Option<u8>,
    pub sb: Option<IceClass>,
    pub cb: Option<u8>,
    pub is_water: bool,
}

impl ChartPolygon {
    pub fn water(geometry: Polygon<f64>) -> Self {
        Self {
            geometry,
            ct: 0,
            sa: None,
            ca: None,
            sb: None,
            cb: None,
            is_water: true,
        }
    }

    /// Single-type ice polygon covering `concentration` tenths.
    pub fn single(geometry: Polygon<f64>, ice: IceClass, concentration: u8) -> Self {
        Self {
            geometry,
            ct: concentration,
            sa: Some(ice),
            ca: Some(concentration),
            sb: None,
            cb: None,
            is_water: false,
        }
    }

    pub fn mixed(
        geometry: Polygon<f64>,
        oldest: (IceClass, u8),
        second: (IceClass, u8),
    ) -> Self {
        Self {
            geometry,
            ct: oldest.1.saturating_add(second.1),
            sa: Some(oldest.0),
            ca: Some(oldest.1),
            sb: Some(second.0),
            cb: Some(second.1),
            is_water: false,
        }
    }

    /// Checks the attribute invariants. Geometry is not inspected here.
    pub fn validate(&self) -> Result<()> {
        if self.ct > 10 {
            return Err(Error::MalformedChart(format!(
                "total concentration {} exceeds 10 tenths",
                self.ct
            )));
        }
        if self.is_water {
            if self.sa.is_some() || self.sb.is_some() || self.ca.is_some() || self.cb.is_some() {
                return Err(Error::MalformedChart(
                    "water polygon carries ice type attributes".into(),
                ));
            }
            return Ok(());
        }
        if self.sa.is_none() && self.sb.is_none() {
            return Err(Error::MalformedChart(
                "ice polygon without any ice type".into(),
            ));
        }
        for (slot, ty, conc) in [("a", self.sa, self.ca), ("b", self.sb, self.cb)] {
            match (ty, conc) {
                (Some(IceClass::Water), _) => {
                    return Err(Error::MalformedChart(format!(
                        "s{slot} holds the water code, not an ice type"
                    )))
                }
                (Some(_), Some(c)) if c == 0 || c > 10 => {
                    return Err(Error::MalformedChart(format!(
                        "c{slot} = {c} outside 1..=10"
                    )))
                }
                (None, Some(_)) => {
                    return Err(Error::MalformedChart(format!(
                        "c{slot} present without s{slot}"
                    )))
                }
                _ => {}
            }
        }
        if let (Some(ca), Some(cb)) = (self.ca, self.cb) {
            if ca + cb > 10 {
                return Err(Error::MalformedChart(format!(
                    "partial concentrations {ca} + {cb} exceed 10 tenths"
                )));
            }
        }
        if self.sa.is_some() && self.sb.is_some() && (self.ca.is_none() || self.cb.is_none()) {
            return Err(Error::MalformedChart(
                "two ice types but a missing partial concentration".into(),
            ));
        }
        Ok(())
    }
}

/// The ice type with the highest partial concentration. Ties go to the
/// older type.
pub fn dominant_type(polygon: &ChartPolygon) -> Result<IceClass> {
    polygon.validate()?;
    if polygon.is_water {
        return Ok(IceClass::Water);
    }
    let dominant = match (polygon.sa, polygon.sb) {
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (Some(a), Some(b)) => {
            // both concentrations are present after validation
            let ca = polygon.ca.unwrap_or(0);
            let cb = polygon.cb.unwrap_or(0);
            match ca.cmp(&cb) {
                std::cmp::Ordering::Greater => a,
                std::cmp::Ordering::Less => b,
                std::cmp::Ordering::Equal => a.max(b),
            }
        }
        (None, None) => unreachable!("rejected by validate"),
    };
    Ok(dominant)
}

/// Pixel count per class, ignore pixels excluded. Classes with no pixels are
/// absent from the map.
pub fn class_frequencies(labels: &LabelRaster) -> BTreeMap<IceClass, u64> {
    let mut counts = [0u64; IceClass::COUNT];
    for &code in &labels.codes {
        if let Some(slot) = counts.get_mut(code as usize) {
            *slot += 1;
        }
    }
    IceClass::ALL
        .iter()
        .zip(counts)
        .filter(|(_, n)| *n > 0)
        .map(|(c, n)| (*c, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GeoTransform, Grid};
    use geo_types::polygon;
    use rand::{Rng, SeedableRng};

    fn square() -> Polygon<f64> {
        polygon![(x: 0.0, y: 0.0), (x: 1.0, y: 0.0), (x: 1.0, y: 1.0), (x: 0.0, y: 1.0)]
    }

    #[test]
    fn codes_are_a_contiguous_bijection() {
        for (i, class) in IceClass::ALL.iter().enumerate() {
            assert_eq!(class.code() as usize, i);
            assert_eq!(IceClass::from_code(i as u8), Some(*class));
        }
        assert_eq!(IceClass::from_code(5), None);
        assert!(IceClass::ALL.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn water_polygon_is_water() {
        assert_eq!(dominant_type(&ChartPolygon::water(square())).unwrap(), IceClass::Water);
    }

    #[test]
    fn higher_concentration_wins() {
        let p = ChartPolygon::mixed(
            square(),
            (IceClass::OldIce, 3),
            (IceClass::FirstYearIce, 6),
        );
        assert_eq!(dominant_type(&p).unwrap(), IceClass::FirstYearIce);
    }

    #[test]
    fn tie_goes_to_older_ice() {
        let p = ChartPolygon::mixed(
            square(),
            (IceClass::OldIce, 5),
            (IceClass::FirstYearIce, 5),
        );
        assert_eq!(dominant_type(&p).unwrap(), IceClass::OldIce);
        // slot order does not matter for the tie-break
        let q = ChartPolygon::mixed(
            square(),
            (IceClass::FirstYearIce, 5),
            (IceClass::OldIce, 5),
        );
        assert_eq!(dominant_type(&q).unwrap(), IceClass::OldIce);
    }

    #[test]
    fn single_type_polygon() {
        let p = ChartPolygon::single(square(), IceClass::YoungIce, 7);
        assert_eq!(dominant_type(&p).unwrap(), IceClass::YoungIce);
    }

    #[test]
    fn untyped_ice_polygon_is_rejected() {
        let mut p = ChartPolygon::single(square(), IceClass::YoungIce, 7);
        p.sa = None;
        p.ca = None;
        assert!(matches!(dominant_type(&p), Err(Error::MalformedChart(_))));
    }

    #[test]
    fn invalid_concentrations_are_rejected() {
        let over = ChartPolygon::mixed(square(), (IceClass::OldIce, 6), (IceClass::NewIce, 5));
        assert!(dominant_type(&over).is_err());
        let zero = ChartPolygon::single(square(), IceClass::OldIce, 0);
        assert!(dominant_type(&zero).is_err());
        let mut water_with_ice = ChartPolygon::water(square());
        water_with_ice.sa = Some(IceClass::NewIce);
        assert!(dominant_type(&water_with_ice).is_err());
    }

    #[test]
    fn exhaustive_enumeration_matches_argmax_with_older_tiebreak() {
        let ice = &IceClass::ALL[1..];
        for &sa in ice {
            for &sb in ice {
                for ca in 1..=10u8 {
                    for cb in 1..=(10 - ca) {
                        let p = ChartPolygon::mixed(square(), (sa, ca), (sb, cb));
                        let expected = if ca > cb {
                            sa
                        } else if cb > ca {
                            sb
                        } else if sa.code() >= sb.code() {
                            sa
                        } else {
                            sb
                        };
                        assert_eq!(dominant_type(&p).unwrap(), expected);
                        // slot swap invariance
                        let q = ChartPolygon::mixed(square(), (sb, cb), (sa, ca));
                        assert_eq!(dominant_type(&q).unwrap(), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn raising_ca_never_flips_to_sb() {
        let ice = &IceClass::ALL[1..];
        for &sa in ice {
            for &sb in ice {
                for cb in 1..=9u8 {
                    let mut was_sa = false;
                    for ca in 1..=(10 - cb) {
                        let d = dominant_type(&ChartPolygon::mixed(square(), (sa, ca), (sb, cb)))
                            .unwrap();
                        assert!(d == sa || d == sb);
                        if was_sa {
                            assert_eq!(d, sa);
                        }
                        was_sa |= d == sa;
                    }
                }
            }
        }
    }

    fn raster(w: usize, h: usize, codes: Vec<u8>) -> LabelRaster {
        LabelRaster::new(Grid::new(w, h, GeoTransform::north_up(0.0, 0.0, 80.0)), codes).unwrap()
    }

    #[test]
    fn frequencies_skip_ignore() {
        assert!(class_frequencies(&raster(2, 2, vec![IGNORE; 4])).is_empty());
        let f = class_frequencies(&raster(2, 2, vec![0, 0, 4, IGNORE]));
        assert_eq!(f.len(), 2);
        assert_eq!(f[&IceClass::Water], 2);
        assert_eq!(f[&IceClass::OldIce], 1);
    }

    #[test]
    fn frequencies_match_loop_histogram() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<u8> = (0..256)
            .map(|_| {
                let v = rng.gen_range(0..6u8);
                if v == 5 {
                    IGNORE
                } else {
                    v
                }
            })
            .collect();
        let f = class_frequencies(&raster(16, 16, codes.clone()));
        let mut total = 0;
        for class in IceClass::ALL {
            let mut n = 0u64;
            for &c in &codes {
                if c == class.code() {
                    n += 1;
                }
            }
            assert_eq!(f.get(&class).copied().unwrap_or(0), n);
            total += n;
        }
        assert_eq!(f.values().sum::<u64>(), total);
        assert_eq!(total as usize, codes.iter().filter(|&&c| c != IGNORE).count());
    }
}
