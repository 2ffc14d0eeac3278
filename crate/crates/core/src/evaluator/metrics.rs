use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelRaster;
use crate::ice_labels::{IceClass, IGNORE};

/// Rows are true classes, columns predicted classes. Truth-ignore pixels are
/// excluded; labeled pixels the model left unpredicted (prediction = ignore,
/// e.g. nodata) are counted per true class in `unpredicted`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
    pub unpredicted: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            unpredicted: vec![0; classes],
        }
    }

    pub fn from_labels(pred: &LabelRaster, truth: &LabelRaster) -> Result<Self> {
        Self::from_codes(&pred.codes, &truth.codes, IceClass::COUNT)
    }

    pub fn from_codes(pred: &[u8], truth: &[u8], classes: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut m = Self::new(classes);
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE {
                continue;
            }
            if t as usize >= classes {
                return Err(Error::InvalidTarget(t));
            }
            if p == IGNORE {
                m.unpredicted[t as usize] += 1;
            } else if p as usize >= classes {
                return Err(Error::InvalidTarget(p));
            } else {
                m.counts[t as usize * classes + p as usize] += 1;
            }
        }
        Ok(m)
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.unpredicted.iter_mut().zip(&other.unpredicted).for_each(|(a, b)| *a += b);
    }

    /// Labeled pixels of class `k` in the truth.
    pub fn support(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum::<u64>() + self.unpredicted[k]
    }

    pub fn predicted(&self, k: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, k)).sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.classes).map(|k| self.support(k)).sum()
    }

    pub fn to_csv(&self) -> String {
        let name = |k: usize| IceClass::from_code(k as u8).map(|c| c.name().to_string()).unwrap_or_else(|| k.to_string());
        let mut s = String::from("truth\\pred");
        for k in 0..self.classes {
            write!(s, ",{}", name(k)).unwrap();
        }
        s.push_str(",unpredicted\n");
        for t in 0..self.classes {
            s.push_str(&name(t));
            for p in 0..self.classes {
                write!(s, ",{}", self.get(t, p)).unwrap();
            }
            writeln!(s, ",{}", self.unpredicted[t]).unwrap();
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: IceClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene_id: String,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassScore>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(scene_id: &str, confusion: ConfusionMatrix) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::NoEvaluablePixels);
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class: Vec<ClassScore> = (0..confusion.classes)
            .map(|k| {
                let tp = confusion.get(k, k);
                let precision = ratio(tp, confusion.predicted(k));
                let recall = ratio(tp, confusion.support(k));
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassScore {
                    class: IceClass::from_code(k as u8).expect("class code"),
                    precision,
                    recall,
                    f1,
                    support: confusion.support(k),
                }
            })
            .collect();
        let weighted_f1 = per_class.iter().map(|c| c.support as f64 * c.f1).sum::<f64>() / total as f64;
        Ok(Self {
            scene_id: scene_id.to_string(),
            weighted_f1,
            per_class,
            confusion,
        })
    }
}

/// Support-weighted F1 over all labeled truth pixels.
pub fn weighted_f1(pred: &LabelRaster, truth: &LabelRaster) -> Result<EvalReport> {
    if (pred.grid.height, pred.grid.width) != (truth.grid.height, truth.grid.width) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, truth {}x{}",
            pred.grid.height, pred.grid.width, truth.grid.height, truth.grid.width
        )));
    }
    EvalReport::from_confusion("", ConfusionMatrix::from_labels(pred, truth)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GeoTransform, Grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raster(codes: Vec<u8>, w: usize) -> LabelRaster {
        let h = codes.len() / w;
        LabelRaster::new(Grid::new(w, h, GeoTransform::north_up(0.0, 0.0, 80.0)), codes).unwrap()
    }

    fn random_raster(rng: &mut ChaCha8Rng, n: usize, ignore_rate: f64) -> Vec<u8> {
        (0..n)
            .map(|_| if rng.gen_bool(ignore_rate) { IGNORE } else { rng.gen_range(0..5) })
            .collect()
    }

    #[test]
    fn identical_rasters_score_one() {
        let t = raster(vec![0, 1, 1, 4, IGNORE, 2], 3);
        assert_eq!(weighted_f1(&t, &t).unwrap().weighted_f1, 1.0);
    }

    #[test]
    fn all_wrong_scores_zero() {
        let r = weighted_f1(&raster(vec![4; 16], 4), &raster(vec![0; 16], 4)).unwrap();
        assert_eq!(r.weighted_f1, 0.0);
        assert_eq!(r.per_class[4].f1, 0.0);
        assert_eq!(r.per_class[4].support, 0);
    }

    #[test]
    fn all_ignore_truth_is_an_error() {
        assert!(matches!(
            weighted_f1(&raster(vec![0; 4], 2), &raster(vec![IGNORE; 4], 2)),
            Err(Error::NoEvaluablePixels)
        ));
    }

    #[test]
    fn confusion_total_counts_labeled_truth_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_raster(&mut rng, 400, 0.1);
        let t = random_raster(&mut rng, 400, 0.2);
        let m = ConfusionMatrix::from_codes(&p, &t, 5).unwrap();
        assert_eq!(m.total() as usize, t.iter().filter(|&&c| c != IGNORE).count());
        assert!(m.to_csv().starts_with("truth\\pred,Water,NewIce"));
    }

    #[test]
    fn weighted_f1_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let p = random_raster(&mut rng, 64 * 64, 0.0);
            let t = random_raster(&mut rng, 64 * 64, 0.1);
            // plain per-class loops, no shared code with the implementation
            let mut f1_sum = 0.0;
            let mut n = 0usize;
            for k in 0..5u8 {
                let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
                for i in 0..t.len() {
                    if t[i] == IGNORE {
                        continue;
                    }
                    match (p[i] == k, t[i] == k) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fnn += 1,
                        _ => {}
                    }
                }
                let prec = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
                let rec = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
                let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
                f1_sum += f1 * (tp + fnn) as f64;
                n += tp + fnn;
            }
            let got = weighted_f1(&raster(p, 64), &raster(t, 64)).unwrap().weighted_f1;
            assert_eq!(got, f1_sum / n as f64);
        }
    }

    #[test]
    fn relabeling_both_rasters_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_raster(&mut rng, 900, 0.0);
        let t = random_raster(&mut rng, 900, 0.1);
        let perm = [2u8, 4, 0, 1, 3];
        let map = |v: &[u8]| -> Vec<u8> { v.iter().map(|&c| if c == IGNORE { c } else { perm[c as usize] }).collect() };
        let a = weighted_f1(&raster(p.clone(), 30), &raster(t.clone(), 30)).unwrap().weighted_f1;
        let b = weighted_f1(&raster(map(&p), 30), &raster(map(&t), 30)).unwrap().weighted_f1;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn unpredicted_pixels_lower_recall_only() {
        let r = weighted_f1(&raster(vec![0, IGNORE], 2), &raster(vec![0, 0], 2)).unwrap();
        assert_eq!(r.per_class[0].precision, 1.0);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert_eq!(r.confusion.total(), 2);
    }
}
