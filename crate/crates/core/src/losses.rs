//! Training-objective terms and their weighted sum.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::MaskMap;

/// Mean absolute difference.
pub fn l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("l1 on lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean absolute difference over pixels whose mask value is positive. `channels` values per
/// pixel; the mask has one value per pixel. Returns 0 for an empty mask.
pub fn l1_masked(a: &[f64], b: &[f64], mask: &[f64], channels: usize) -> Result<f64> {
    if a.len() != b.len() || channels == 0 || a.len() != mask.len() * channels {
        return Err(Error::contract("masked l1 needs equal maps and one mask value per pixel"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, m) in mask.iter().enumerate() {
        if *m > 0.0 {
            let r = i * channels..(i + 1) * channels;
            sum += a[r.clone()].iter().zip(&b[r]).map(|(x, y)| (x - y).abs()).sum::<f64>();
            n += channels;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean absolute difference between features sampled at the recorded points and the recorded
/// features, both stored point-major with `channels` values per point.
pub fn loss_tri(sampled: &[f64], recorded: &[f64], channels: usize) -> Result<f64> {
    if channels == 0 || !sampled.len().is_multiple_of(channels) {
        return Err(Error::contract("feature arrays must hold whole points"));
    }
    if sampled.len() != recorded.len() {
        return Err(Error::contract(format!(
            "{} sampled points vs {} recorded",
            sampled.len() / channels,
            recorded.len() / channels
        )));
    }
    l1(sampled, recorded)
}

/// Sum of head densities over samples whose projected pixel lies inside the part mask.
/// Projections outside the image count as outside the mask.
pub fn loss_part(sigma: &[f64], projections: &[(f64, f64)], mask: &MaskMap) -> Result<f64> {
    if sigma.len() != projections.len() {
        return Err(Error::contract("one projection per density sample required"));
    }
    let mut sum = 0.0;
    for (s, (u, v)) in sigma.iter().zip(projections) {
        if *u < 0.0 || *v < 0.0 {
            continue;
        }
        let (px, py) = (u.floor() as usize, v.floor() as usize);
        if px < mask.width && py < mask.height && mask.mask[py * mask.width + px] > 0.0 {
            sum += s;
        }
    }
    Ok(sum)
}

/// Balancing weights of the seven objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub re: f64,
    pub f: f64,
    pub tri: f64,
    pub depth: f64,
    pub opa: f64,
    pub id: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            re: 1.0,
            f: 1.0,
            tri: 0.1,
            depth: 1.0,
            opa: 0.3,
            id: 1.0,
            adv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::contract("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.re, self.f, self.tri, self.depth, self.opa, self.id, self.adv]
    }
}

/// A term backed by a pretrained network (perceptual, identity, adversarial).
pub trait LossHook {
    fn value(&self) -> f64;
}

impl<F: Fn() -> f64> LossHook for F {
    fn value(&self) -> f64 {
        self()
    }
}

/// Unweighted term values. `re_perceptual`, `id` and `adv` come from hooks and are 0 when no
/// hook is installed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub re_l1: f64,
    pub re_perceptual: f64,
    pub f: f64,
    pub tri: f64,
    pub depth: f64,
    pub opa: f64,
    pub id: f64,
    pub adv: f64,
}

impl LossTerms {
    /// Every term set to `v` (hook terms included).
    pub fn uniform(v: f64) -> Self {
        Self {
            re_l1: v,
            re_perceptual: 0.0,
            f: v,
            tri: v,
            depth: v,
            opa: v,
            id: v,
            adv: v,
        }
    }

    pub fn with_hooks(mut self, perceptual: Option<&dyn LossHook>, id: Option<&dyn LossHook>, adv: Option<&dyn LossHook>) -> Self {
        self.re_perceptual = perceptual.map_or(0.0, |h| h.value());
        self.id = id.map_or(0.0, |h| h.value());
        self.adv = adv.map_or(0.0, |h| h.value());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossReport {
    /// One `key=value` line per term plus the total.
    pub fn to_text(&self) -> String {
        let t = &self.terms;
        let mut s = String::new();
        for (k, v) in [
            ("re_l1", t.re_l1),
            ("re_perceptual", t.re_perceptual),
            ("f", t.f),
            ("tri", t.tri),
            ("depth", t.depth),
            ("opa", t.opa),
            ("id", t.id),
            ("adv", t.adv),
            ("total", self.total),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// `L = w_re L_re + w_f L_f + w_tri L_tri + w_depth L_depth + w_opa L_opa + w_id L_id + w_adv L_adv`
/// with `L_re` the sum of its L1 and perceptual parts.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let total = w.re * (terms.re_l1 + terms.re_perceptual)
        + w.f * terms.f
        + w.tri * terms.tri
        + w.depth * terms.depth
        + w.opa * terms.opa
        + w.id * terms.id
        + w.adv * terms.adv;
    Ok(LossReport {
        terms: *terms,
        weights: *w,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_basics() {
        let a = [0.5, -1.0, 2.0];
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x - 0.25).collect();
        assert!((l1(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!(l1(&a, &b[..2]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut s = 0.0;
        for i in 0..500 {
            s += if x[i] > y[i] { x[i] - y[i] } else { y[i] - x[i] };
        }
        assert!((l1(&x, &y).unwrap() - s / 500.0).abs() < 1e-9);
        assert_eq!(l1(&x, &y).unwrap(), l1(&y, &x).unwrap());
    }

    #[test]
    fn masked_l1() {
        let a = [1.0, 1.0, 5.0, 5.0];
        let b = [0.0, 0.0, 0.0, 0.0];
        assert_eq!(l1_masked(&a, &b, &[1.0, 0.0], 2).unwrap(), 1.0);
        assert_eq!(l1_masked(&a, &b, &[0.0, 0.0], 2).unwrap(), 0.0);
    }

    #[test]
    fn tri_single_offset() {
        let a = vec![0.0; 4000 * 32];
        let mut b = a.clone();
        b[1234] = 1.0;
        assert!((loss_tri(&a, &b, 32).unwrap() - 1.0 / (4000.0 * 32.0)).abs() < 1e-18);
        assert!(loss_tri(&a, &b[..32], 32).is_err());
    }

    #[test]
    fn part_sum() {
        let mut m = MaskMap::filled(4, 4, 0.0);
        m.mask[5] = 1.0;
        m.mask[10] = 1.0;
        let sigma = [0.5, 0.25, 7.0];
        let proj = [(1.5, 1.5), (2.2, 2.9), (3.5, 0.5)];
        assert_eq!(loss_part(&sigma, &proj, &m).unwrap(), 0.75);
        assert_eq!(loss_part(&sigma, &proj, &MaskMap::filled(4, 4, 0.0)).unwrap(), 0.0);
        assert_eq!(loss_part(&[0.0; 3], &proj, &m).unwrap(), 0.0);
    }

    #[test]
    fn paper_weight_examples() {
        let w = LossWeights::default();
        let all = total_loss(&LossTerms::uniform(1.0), &w).unwrap();
        assert!((all.total - 4.41).abs() < 1e-12);
        let no_hooks = LossTerms::uniform(1.0).with_hooks(None, None, None);
        assert!((total_loss(&no_hooks, &w).unwrap().total - 3.4).abs() < 1e-12);
        assert_eq!(total_loss(&LossTerms::uniform(0.0), &w).unwrap().total, 0.0);
        let hook = || 2.0;
        let with = LossTerms::default().with_hooks(None, Some(&hook), None);
        assert_eq!(total_loss(&with, &w).unwrap().total, 2.0);
        assert!(total_loss(&all.terms, &LossWeights { tri: -1.0, ..w }).is_err());
        assert!(all.to_text().contains("total=4.41"));
    }
}
