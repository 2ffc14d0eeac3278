//! Per-pixel classification objectives with ignore masking: categorical
//! cross-entropy, soft Dice and Focal loss.
//!
//! Each loss returns its scalar value together with the analytic gradient
//! with respect to the logits. Logits are `B x K x H x W`, targets `B x H x W`.
//! Ignored pixels are skipped entirely, so their logits never influence the
//! value and always receive an exact zero gradient.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ice_labels::IGNORE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Dice,
    Focal,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::Dice, LossKind::Focal];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Dice => "dice",
            LossKind::Focal => "focal",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "dice" => Ok(LossKind::Dice),
            "focal" => Ok(LossKind::Focal),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected ce, dice or focal)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub ignore_value: u8,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            dice_smooth: 1.0,
            ignore_value: IGNORE,
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return Err(Error::Config(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        if self.dice_smooth.is_nan() || self.dice_smooth <= 0.0 {
            return Err(Error::Config(format!(
                "dice_smooth must be > 0, got {}",
                self.dice_smooth
            )));
        }
        if !self.focal_alpha.is_finite() || self.focal_alpha <= 0.0 {
            return Err(Error::Config(format!(
                "focal_alpha must be positive, got {}",
                self.focal_alpha
            )));
        }
        Ok(())
    }

    pub fn evaluate<F: Float>(
        &self,
        logits: &[F],
        shape: [usize; 4],
        targets: &[u8],
    ) -> Result<LossOutput<F>> {
        match self.kind {
            LossKind::Ce => ce_loss(logits, shape, targets, self.ignore_value),
            LossKind::Dice => dice_loss(logits, shape, targets, self.dice_smooth, self.ignore_value),
            LossKind::Focal => focal_loss(
                logits,
                shape,
                targets,
                self.focal_gamma,
                self.focal_alpha,
                self.ignore_value,
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<F> {
    pub value: f64,
    /// d(value)/d(logits), same layout as the logits.
    pub grad: Vec<F>,
    /// Number of pixels that contributed.
    pub pixels: usize,
}

fn check_inputs<F>(logits: &[F], shape: [usize; 4], targets: &[u8], ignore: u8) -> Result<usize> {
    let [b, k, h, w] = shape;
    if logits.len() != b * k * h * w {
        return Err(Error::Shape(format!(
            "{} logits for shape {shape:?}",
            logits.len()
        )));
    }
    if targets.len() != b * h * w {
        return Err(Error::Shape(format!(
            "{} targets for logits of shape {shape:?}",
            targets.len()
        )));
    }
    let mut count = 0;
    for &t in targets {
        if t == ignore {
            continue;
        }
        if t as usize >= k {
            return Err(Error::InvalidTarget(t));
        }
        count += 1;
    }
    Ok(count)
}

/// Visits every non-ignored pixel with its log-softmax vector.
fn for_each_pixel<F: Float>(
    logits: &[F],
    [b, k, h, w]: [usize; 4],
    targets: &[u8],
    ignore: u8,
    mut visit: impl FnMut(&[usize], usize, &[F]),
) {
    let plane = h * w;
    let mut idx = vec![0usize; k];
    let mut logp = vec![F::zero(); k];
    for s in 0..b {
        for i in 0..plane {
            let t = targets[s * plane + i];
            if t == ignore {
                continue;
            }
            for (c, slot) in idx.iter_mut().enumerate() {
                *slot = (s * k + c) * plane + i;
            }
            let m = idx
                .iter()
                .map(|&j| logits[j])
                .fold(F::neg_infinity(), F::max);
            let sum = idx
                .iter()
                .map(|&j| (logits[j] - m).exp())
                .fold(F::zero(), |a, v| a + v);
            let lse = m + sum.ln();
            for (slot, &j) in logp.iter_mut().zip(&idx) {
                *slot = logits[j] - lse;
            }
            visit(&idx, t as usize, &logp);
        }
    }
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("representable")
}

/// Mean over non-ignored pixels of `-log softmax(logits)[target]`.
pub fn ce_loss<F: Float>(
    logits: &[F],
    shape: [usize; 4],
    targets: &[u8],
    ignore: u8,
) -> Result<LossOutput<F>> {
    let count = check_inputs(logits, shape, targets, ignore)?;
    let mut grad = vec![F::zero(); logits.len()];
    if count == 0 {
        return Ok(LossOutput { value: 0.0, grad, pixels: 0 });
    }
    let inv = cast::<F>(1.0 / count as f64);
    let mut total = 0.0f64;
    for_each_pixel(logits, shape, targets, ignore, |idx, t, logp| {
        total += -logp[t].to_f64().unwrap();
        for (c, (&j, &lp)) in idx.iter().zip(logp).enumerate() {
            let delta = if c == t { F::one() } else { F::zero() };
            grad[j] = (lp.exp() - delta) * inv;
        }
    });
    Ok(LossOutput {
        value: total / count as f64,
        grad,
        pixels: count,
    })
}

/// Mean over non-ignored pixels of `-alpha (1 - p_t)^gamma log p_t`.
pub fn focal_loss<F: Float>(
    logits: &[F],
    shape: [usize; 4],
    targets: &[u8],
    gamma: f64,
    alpha: f64,
    ignore: u8,
) -> Result<LossOutput<F>> {
    let count = check_inputs(logits, shape, targets, ignore)?;
    let mut grad = vec![F::zero(); logits.len()];
    if count == 0 {
        return Ok(LossOutput { value: 0.0, grad, pixels: 0 });
    }
    let inv = cast::<F>(1.0 / count as f64);
    let (g, a) = (cast::<F>(gamma), cast::<F>(alpha));
    let mut total = 0.0f64;
    for_each_pixel(logits, shape, targets, ignore, |idx, t, logp| {
        let log_pt = logp[t];
        let pt = log_pt.exp();
        let rest = F::one() - pt;
        let modulation = rest.powf(g);
        total += (-(a * modulation * log_pt)).to_f64().unwrap();
        // dL/dz_j = alpha [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (delta_tj - p_j)
        let focus = if gamma != 0.0 && rest > F::zero() {
            g * rest.powf(g - F::one()) * pt * log_pt
        } else {
            F::zero()
        };
        let coef = a * (focus - modulation) * inv;
        for (c, (&j, &lp)) in idx.iter().zip(logp).enumerate() {
            let delta = if c == t { F::one() } else { F::zero() };
            grad[j] = coef * (delta - lp.exp());
        }
    });
    Ok(LossOutput {
        value: total / count as f64,
        grad,
        pixels: count,
    })
}

/// `1 - mean_k (2 sum p_k g_k + s) / (sum p_k + sum g_k + s)` over the classes
/// present in the (non-ignored) targets, sums taken over the whole batch.
pub fn dice_loss<F: Float>(
    logits: &[F],
    shape: [usize; 4],
    targets: &[u8],
    smooth: f64,
    ignore: u8,
) -> Result<LossOutput<F>> {
    let count = check_inputs(logits, shape, targets, ignore)?;
    let k = shape[1];
    let mut grad = vec![F::zero(); logits.len()];
    if count == 0 {
        return Ok(LossOutput { value: 0.0, grad, pixels: 0 });
    }

    let mut inter = vec![0.0f64; k];
    let mut pred = vec![0.0f64; k];
    let mut truth = vec![0.0f64; k];
    let mut probs: Vec<F> = Vec::with_capacity(count * k);
    let mut pixels: Vec<(usize, usize)> = Vec::with_capacity(count);
    for_each_pixel(logits, shape, targets, ignore, |idx, t, logp| {
        for (c, &lp) in logp.iter().enumerate() {
            let p = lp.exp();
            probs.push(p);
            pred[c] += p.to_f64().unwrap();
        }
        inter[t] += probs[probs.len() - k + t].to_f64().unwrap();
        truth[t] += 1.0;
        pixels.push((idx[0], t));
    });

    let present: Vec<usize> = (0..k).filter(|&c| truth[c] > 0.0).collect();
    let denom: Vec<f64> = (0..k).map(|c| pred[c] + truth[c] + smooth).collect();
    let score: f64 = present
        .iter()
        .map(|&c| (2.0 * inter[c] + smooth) / denom[c])
        .sum::<f64>()
        / present.len() as f64;

    // dL/dp_c = -(2 g_c / D_c - (2 I_c + s) / D_c^2) / |present| for present c
    let scale = 1.0 / present.len() as f64;
    let mut on_target = vec![F::zero(); k];
    let mut off_target = vec![F::zero(); k];
    for &c in &present {
        let d = denom[c];
        let a = (2.0 * inter[c] + smooth) / (d * d);
        off_target[c] = cast(scale * a);
        on_target[c] = cast(scale * (a - 2.0 / d));
    }
    let plane = shape[2] * shape[3];
    let mut du = vec![F::zero(); k];
    for (n, &(first, t)) in pixels.iter().enumerate() {
        let p = &probs[n * k..(n + 1) * k];
        let mut weighted = F::zero();
        for c in 0..k {
            du[c] = if c == t { on_target[c] } else { off_target[c] };
            weighted = weighted + p[c] * du[c];
        }
        for c in 0..k {
            grad[first + c * plane] = p[c] * (du[c] - weighted);
        }
    }
    Ok(LossOutput {
        value: 1.0 - score,
        grad,
        pixels: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const K: usize = 5;

    fn random_case(seed: u64, shape: [usize; 4], ignore_rate: f64) -> (Vec<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [b, k, h, w] = shape;
        let logits = (0..b * k * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = (0..b * h * w)
            .map(|_| {
                if rng.gen_bool(ignore_rate) {
                    IGNORE
                } else {
                    rng.gen_range(0..k as u8)
                }
            })
            .collect();
        (logits, targets)
    }

    /// Independent scalar recomputation: explicit exp/log per pixel.
    fn scalar_oracle(logits: &[f64], shape: [usize; 4], targets: &[u8], gamma: f64, alpha: f64) -> f64 {
        let [b, k, h, w] = shape;
        let mut total = 0.0;
        let mut n = 0;
        for s in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let t = targets[(s * h + y) * w + x];
                    if t == IGNORE {
                        continue;
                    }
                    let z = |c: usize| logits[((s * k + c) * h + y) * w + x];
                    let denom: f64 = (0..k).map(|c| z(c).exp()).sum();
                    let p = z(t as usize).exp() / denom;
                    total += -alpha * (1.0 - p).powf(gamma) * p.ln();
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let out = ce_loss(&[0.0f64; K * 4], [1, K, 2, 2], &[0, 1, 2, 3], IGNORE).unwrap();
        assert_relative_eq!(out.value, 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_ce() {
        let mut logits = vec![0.0f32; K];
        logits[3] = 1000.0;
        let out = ce_loss(&logits, [1, K, 1, 1], &[3], IGNORE).unwrap();
        assert!(out.value.abs() < 1e-6 && out.value >= 0.0);
    }

    #[test]
    fn ce_and_focal_match_scalar_oracle() {
        let shape = [1, K, 2, 2];
        let (logits, targets) = random_case(9, shape, 0.0);
        let ce = ce_loss(&logits, shape, &targets, IGNORE).unwrap();
        assert_relative_eq!(ce.value, scalar_oracle(&logits, shape, &targets, 0.0, 1.0), max_relative = 1e-12);
        let fl = focal_loss(&logits, shape, &targets, 2.0, 1.0, IGNORE).unwrap();
        assert_relative_eq!(fl.value, scalar_oracle(&logits, shape, &targets, 2.0, 1.0), max_relative = 1e-12);
    }

    #[test]
    fn focal_with_zero_gamma_is_ce_bit_for_bit() {
        let shape = [2, K, 3, 3];
        let (logits, targets) = random_case(4, shape, 0.2);
        let ce = ce_loss(&logits, shape, &targets, IGNORE).unwrap();
        let fl = focal_loss(&logits, shape, &targets, 0.0, 1.0, IGNORE).unwrap();
        assert_eq!(ce.value.to_bits(), fl.value.to_bits());
        for (a, b) in ce.grad.iter().zip(&fl.grad) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_half_probability_pixel() {
        // e^{ln 4} / (e^{ln 4} + 4) = 1/2
        let logits = [4f64.ln(), 0.0, 0.0, 0.0, 0.0];
        let out = focal_loss(&logits, [1, K, 1, 1], &[0], 2.0, 1.0, IGNORE).unwrap();
        assert_relative_eq!(out.value, 0.25 * 2f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn dice_uniform_prediction_closed_form() {
        // single-class target of N = 16 pixels, uniform 1/K prediction
        let n = 16.0;
        let k = K as f64;
        let out = dice_loss(&[0.0f64; K * 16], [1, K, 4, 4], &[2; 16], 1.0, IGNORE).unwrap();
        let expected = 1.0 - (2.0 * n / k + 1.0) / (n / k + n + 1.0);
        assert_relative_eq!(out.value, expected, max_relative = 1e-12);
    }

    #[test]
    fn dice_perfect_prediction_vanishes() {
        let shape = [1, K, 2, 2];
        let targets = [0u8, 1, 4, 4];
        let mut logits = vec![-10.0f64; K * 4];
        for (i, &t) in targets.iter().enumerate() {
            logits[t as usize * 4 + i] = 10.0;
        }
        let out = dice_loss(&logits, shape, &targets, 1.0, IGNORE).unwrap();
        assert!(out.value < 1e-3, "{}", out.value);
    }

    #[test]
    fn dice_empty_overlap_is_smoothed() {
        // target class 0 everywhere, all probability mass on class 1
        let shape = [1, K, 1, 2];
        let mut logits = vec![-50.0f64; K * 2];
        logits[2] = 50.0;
        logits[3] = 50.0;
        let out = dice_loss(&logits, shape, &[0, 0], 1.0, IGNORE).unwrap();
        let p0: f64 = 2.0 * (-100f64).exp() / (1.0 + 3.0 * (-100f64).exp() + (-100f64).exp());
        let expected = 1.0 - (2.0 * p0 + 1.0) / (p0 + 2.0 + 1.0);
        assert_relative_eq!(out.value, expected, max_relative = 1e-9);
        assert_relative_eq!(out.value, 1.0 - 1.0 / 3.0, max_relative = 1e-9);
    }

    #[test]
    fn all_ignored_batch_is_zero_with_zero_gradient() {
        let (logits, _) = random_case(1, [1, K, 2, 2], 0.0);
        for spec in LossKind::ALL.map(LossSpec::new) {
            let out = spec.evaluate(&logits, [1, K, 2, 2], &[IGNORE; 4]).unwrap();
            assert_eq!(out.value, 0.0);
            assert!(out.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn invalid_target_is_rejected() {
        for spec in LossKind::ALL.map(LossSpec::new) {
            assert!(matches!(
                spec.evaluate(&[0.0f32; K], [1, K, 1, 1], &[7]),
                Err(Error::InvalidTarget(7))
            ));
        }
    }

    fn numeric_grad(spec: &LossSpec, logits: &[f64], shape: [usize; 4], targets: &[u8]) -> Vec<f64> {
        let h = 1e-6;
        (0..logits.len())
            .map(|i| {
                let mut up = logits.to_vec();
                up[i] += h;
                let mut down = logits.to_vec();
                down[i] -= h;
                (spec.evaluate(&up, shape, targets).unwrap().value
                    - spec.evaluate(&down, shape, targets).unwrap().value)
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        let shape = [2, K, 4, 4];
        for kind in LossKind::ALL {
            let spec = LossSpec::new(kind);
            for seed in 0..3 {
                let (logits, targets) = random_case(100 + seed, shape, 0.1);
                let analytic = spec.evaluate(&logits, shape, &targets).unwrap().grad;
                let numeric = numeric_grad(&spec, &logits, shape, &targets);
                let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
                let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                    .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
                assert!(diff / norm < 1e-4, "{kind}: relative error {}", diff / norm);
            }
        }
    }

    #[test]
    fn ignored_pixels_are_inert() {
        let shape = [2, K, 3, 3];
        let (logits, targets) = random_case(8, shape, 0.4);
        let mut perturbed = logits.clone();
        let plane = 9;
        for (p, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                let (s, i) = (p / plane, p % plane);
                for c in 0..K {
                    perturbed[(s * K + c) * plane + i] += 1e3 * (c as f64 + 1.0);
                }
            }
        }
        for spec in LossKind::ALL.map(LossSpec::new) {
            let a = spec.evaluate(&logits, shape, &targets).unwrap();
            let b = spec.evaluate(&perturbed, shape, &targets).unwrap();
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            assert_eq!(a.grad, b.grad);
            for (p, &t) in targets.iter().enumerate() {
                if t == IGNORE {
                    let (s, i) = (p / plane, p % plane);
                    for c in 0..K {
                        assert_eq!(a.grad[(s * K + c) * plane + i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn class_permutation_invariance() {
        let shape = [1, K, 4, 4];
        let (logits, targets) = random_case(21, shape, 0.1);
        let perm = [3usize, 0, 4, 1, 2];
        let mut plogits = vec![0.0; logits.len()];
        for c in 0..K {
            plogits[perm[c] * 16..(perm[c] + 1) * 16].copy_from_slice(&logits[c * 16..(c + 1) * 16]);
        }
        let ptargets: Vec<u8> = targets
            .iter()
            .map(|&t| if t == IGNORE { t } else { perm[t as usize] as u8 })
            .collect();
        for spec in LossKind::ALL.map(LossSpec::new) {
            let a = spec.evaluate(&logits, shape, &targets).unwrap().value;
            let b = spec.evaluate(&plogits, shape, &ptargets).unwrap().value;
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn spec_validation_and_parsing() {
        assert!(LossSpec { focal_gamma: -1.0, ..LossSpec::default() }.validate().is_err());
        assert!(LossSpec { dice_smooth: 0.0, ..LossSpec::default() }.validate().is_err());
        assert!(LossSpec::default().validate().is_ok());
        assert_eq!("focal".parse::<LossKind>().unwrap(), LossKind::Focal);
        assert!("bce".parse::<LossKind>().is_err());
    }

    proptest! {
        #[test]
        fn losses_are_finite_nonnegative_and_focal_below_ce(seed in 0u64..1000, gamma in 0.0f64..5.0) {
            let shape = [2, K, 3, 2];
            let (logits, targets) = random_case(seed, shape, 0.2);
            let ce = ce_loss(&logits, shape, &targets, IGNORE).unwrap().value;
            let fl = focal_loss(&logits, shape, &targets, gamma, 1.0, IGNORE).unwrap().value;
            let dc = dice_loss(&logits, shape, &targets, 1.0, IGNORE).unwrap().value;
            for v in [ce, fl, dc] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
            prop_assert!(dc <= 1.0);
            prop_assert!(fl <= ce + 1e-12);
        }
    }
}
