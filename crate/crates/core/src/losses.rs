//! Hybrid training objective: soft Dice for segmentation, global SSIM for the
//! generator, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::dropout::PatternMask;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volumes::{Modality, MultiModalVolume, Volume};

/// Smoothing added to both numerator and denominator of every Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Default trade-off weights of the generator and correlation terms.
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_ETA: f64 = 0.1;

fn dice_terms<'a>(probs: &'a [f64], target: &'a [f64], classes: usize) -> impl Iterator<Item = (usize, f64, f64)> + 'a {
    let n = probs.len() / classes;
    (1..classes).map(move |c| {
        let p = &probs[c * n..(c + 1) * n];
        let g = &target[c * n..(c + 1) * n];
        let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let union: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
        (c, inter, union)
    })
}

/// Mean over foreground classes (1..classes) of `1 − (2Σpg + ε)/(Σp + Σg + ε)`.
///
/// `probs` and `target` are class-major `[classes, N]`; class 0 is background.
pub fn dice_loss_flat(probs: &[f64], target: &[f64], classes: usize) -> f64 {
    let fg = (classes - 1) as f64;
    dice_terms(probs, target, classes)
        .map(|(_, i, u)| 1.0 - (2.0 * i + DICE_EPS) / (u + DICE_EPS))
        .sum::<f64>()
        / fg
}

/// Gradient of [`dice_loss_flat`] with respect to `probs`.
pub fn dice_loss_grad_flat(probs: &[f64], target: &[f64], classes: usize) -> Vec<f64> {
    let n = probs.len() / classes;
    let fg = (classes - 1) as f64;
    let mut grad = vec![0.0; probs.len()];
    for (c, inter, union) in dice_terms(probs, target, classes) {
        let den = union + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        for i in 0..n {
            grad[c * n + i] = -(2.0 * target[c * n + i] * den - num) / (den * den) / fg;
        }
    }
    grad
}

/// Soft Dice loss on `[classes, D, H, W]` probability and one-hot maps.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<f64> {
    if probs.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    if probs.channels() < 2 {
        return Err(Error::Shape("need a background and at least one foreground class".into()));
    }
    if probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Numeric("probabilities outside [0, 1]".into()));
    }
    let p: Vec<f64> = probs.data().iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    Ok(dice_loss_flat(&p, &g, probs.channels()))
}

/// Stabilizers of the SSIM ratio; both strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::Numeric(format!("SSIM constants must be > 0, got {c1}, {c2}")));
        }
        Ok(Self { c1, c2 })
    }

    /// `c1 = (0.01 L)²`, `c2 = (0.03 L)²` for dynamic range `L`.
    pub fn for_range(range: f64) -> Self {
        let l = if range > 0.0 && range.is_finite() { range } else { 1.0 };
        Self {
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
        }
    }

    /// Constants from the dynamic range of the reference volume (1 if constant).
    pub fn for_target(target: &[f32]) -> Self {
        let (lo, hi) = target
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self::for_range((hi - lo) as f64)
    }
}

struct SsimStats {
    n: f64,
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cxy: f64,
}

fn ssim_stats(x: &[f64], y: &[f64]) -> SsimStats {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    SsimStats {
        n,
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cxy: cxy / n,
    }
}

/// `1 − SSIM` from whole-volume statistics (population moments).
pub fn ssim_loss_flat(generated: &[f64], target: &[f64], c: SsimConstants) -> f64 {
    let s = ssim_stats(generated, target);
    let a = 2.0 * s.mx * s.my + c.c1;
    let b = 2.0 * s.cxy + c.c2;
    let cc = s.mx * s.mx + s.my * s.my + c.c1;
    let d = s.vx + s.vy + c.c2;
    1.0 - a * b / (cc * d)
}

/// Gradient of [`ssim_loss_flat`] with respect to `generated`.
pub fn ssim_loss_grad_flat(generated: &[f64], target: &[f64], c: SsimConstants) -> Vec<f64> {
    let s = ssim_stats(generated, target);
    let a = 2.0 * s.mx * s.my + c.c1;
    let b = 2.0 * s.cxy + c.c2;
    let cc = s.mx * s.mx + s.my * s.my + c.c1;
    let d = s.vx + s.vy + c.c2;
    let (cd, ab) = (cc * d, a * b);
    generated
        .iter()
        .zip(target)
        .map(|(&xi, &yi)| {
            let da = 2.0 * s.my / s.n;
            let db = 2.0 * (yi - s.my) / s.n;
            let dc = 2.0 * s.mx / s.n;
            let dd = 2.0 * (xi - s.mx) / s.n;
            let dssim = ((da * b + a * db) * cd - ab * (dc * d + cc * dd)) / (cd * cd);
            -dssim
        })
        .collect()
}

/// `1 − SSIM(generated, target)` for one volume pair.
pub fn ssim_loss(generated: &[f32], target: &[f32], c: SsimConstants) -> Result<f64> {
    if generated.len() != target.len() {
        return Err(Error::Shape(format!("{} vs {} voxels", generated.len(), target.len())));
    }
    if generated.len() < 2 {
        return Err(Error::Shape("SSIM needs at least 2 voxels".into()));
    }
    SsimConstants::new(c.c1, c.c2)?;
    let x: Vec<f64> = generated.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let loss = ssim_loss_flat(&x, &y, c);
    if !loss.is_finite() {
        return Err(Error::Numeric("SSIM is not finite".into()));
    }
    Ok(loss)
}

/// Mean of per-example SSIM losses.
pub fn ssim_loss_batch(pairs: &[(&[f32], &[f32])], c: SsimConstants) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut total = 0.0;
    for (g, t) in pairs {
        total += ssim_loss(g, t, c)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Voxel-wise mean of the sequences the pattern drops, or of all four when
/// nothing is dropped.
pub fn generator_target(full: &MultiModalVolume, pattern: PatternMask) -> Result<Volume> {
    let mut sources: Vec<Modality> = pattern.missing().collect();
    if sources.is_empty() {
        sources = Modality::ALL.to_vec();
    }
    let mut acc = vec![0.0f64; full.shape.iter().product()];
    for m in &sources {
        let v = full.available(*m).ok_or_else(|| {
            Error::Supervision(format!(
                "subject {} has no {m} to supervise the generator",
                full.subject_id
            ))
        })?;
        for (a, &x) in acc.iter_mut().zip(&v.data) {
            *a += x as f64;
        }
    }
    let k = sources.len() as f64;
    Volume::new(full.shape, acc.into_iter().map(|a| (a / k) as f32).collect())
}

/// Components and weights of one evaluation of the hybrid objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub gen: f64,
    pub cc: f64,
    pub total: f64,
    pub lambda: f64,
    pub eta: f64,
}

/// `seg + λ·gen + η·cc`
pub fn total_loss(seg: f64, gen: f64, cc: f64, lambda: f64, eta: f64) -> Result<LossReport> {
    for (name, v) in [("seg", seg), ("gen", gen), ("cc", cc), ("lambda", lambda), ("eta", eta)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {v}")));
        }
    }
    Ok(LossReport {
        seg,
        gen,
        cc,
        total: seg + lambda * gen + eta * cc,
        lambda,
        eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot(codes: &[usize], classes: usize) -> Vec<f64> {
        let n = codes.len();
        let mut out = vec![0.0; classes * n];
        for (i, &c) in codes.iter().enumerate() {
            out[c * n + i] = 1.0;
        }
        out
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let codes = [0, 1, 2, 3, 1, 2, 3, 0];
        let g = one_hot(&codes, 4);
        assert!(dice_loss_flat(&g, &g, 4) <= 1e-6);
        let shifted: Vec<usize> = codes.iter().map(|c| if *c == 0 { 0 } else { c % 3 + 1 }).collect();
        let p = one_hot(&shifted, 4);
        assert!((dice_loss_flat(&p, &g, 4) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn dice_half_coverage_closed_form() {
        // two classes, n voxels, target covers half, prediction uniform 0.5
        let n = 64;
        let mut target = vec![0.0; 2 * n];
        for i in 0..n / 2 {
            target[n + i] = 1.0;
        }
        for i in n / 2..n {
            target[i] = 1.0;
        }
        let probs = vec![0.5; 2 * n];
        assert!((dice_loss_flat(&probs, &target, 2) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[4, 2, 2, 2]);
        let b = Tensor::zeros(&[4, 2, 2, 1]);
        assert!(dice_loss(&a, &b).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x: Vec<f32> = (0..64).map(|i| (i as f32 * 0.3).sin()).collect();
        let c = SsimConstants::for_target(&x);
        assert!(ssim_loss(&x, &x, c).unwrap().abs() <= 1e-6);

        let (a, b) = (2.0f64, 0.5f64);
        let c = SsimConstants::new(0.01, 0.03).unwrap();
        let l = ssim_loss(&[a as f32; 8], &[b as f32; 8], c).unwrap();
        let expected = 1.0 - (2.0 * a * b + c.c1) / (a * a + b * b + c.c1);
        assert!((l - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_negated_zero_mean_target() {
        let t: Vec<f32> = (0..32).map(|i| if i % 2 == 0 { 1.5 } else { -1.5 }).collect();
        let g: Vec<f32> = t.iter().map(|v| -v).collect();
        let c = SsimConstants::for_target(&t);
        let var = 1.5f64 * 1.5;
        let expected = 1.0 - (c.c1 * (-2.0 * var + c.c2)) / (c.c1 * (2.0 * var + c.c2));
        assert!((ssim_loss(&g, &t, c).unwrap() - expected).abs() < 1e-9);
        assert!(SsimConstants::new(0.0, 1.0).is_err());
    }

    #[test]
    fn ssim_batch_is_mean_of_examples() {
        let a: Vec<f32> = (0..27).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..27).map(|i| (i as f32).sqrt()).collect();
        let c = SsimConstants::for_range(26.0);
        let la = ssim_loss(&a, &b, c).unwrap();
        let lb = ssim_loss(&b, &a, c).unwrap();
        let batch = ssim_loss_batch(&[(&a, &b), (&b, &a)], c).unwrap();
        assert!((batch - (la + lb) / 2.0).abs() < 1e-12);
    }

    fn full_subject() -> MultiModalVolume {
        let vols = Modality::ALL.map(|m| {
            Some(Volume::new([2, 2, 1], (0..4).map(|i| (i * 4 + m.index()) as f32).collect()).unwrap())
        });
        MultiModalVolume::new("s", vols).unwrap()
    }

    #[test]
    fn generator_targets() {
        let s = full_subject();
        let only_flair_missing = PatternMask::from_bits(0b0111).unwrap();
        assert_eq!(generator_target(&s, only_flair_missing).unwrap(), *s.get(Modality::Flair).unwrap());

        let t1_t2_missing = PatternMask::from_bits(0b1010).unwrap();
        let t = generator_target(&s, t1_t2_missing).unwrap();
        for i in 0..4 {
            let expected = (s.get(Modality::T1).unwrap().data[i] + s.get(Modality::T2).unwrap().data[i]) / 2.0;
            assert_eq!(t.data[i], expected);
        }

        let t = generator_target(&s, PatternMask::FULL).unwrap();
        for i in 0..4 {
            let sum: f32 = Modality::ALL.iter().map(|m| s.get(*m).unwrap().data[i]).sum();
            assert!((t.data[i] - sum / 4.0).abs() < 1e-6);
        }

        let partial = crate::dropout::apply_pattern(&s, PatternMask::from_bits(0b1100).unwrap()).unwrap();
        assert!(matches!(
            generator_target(&partial, PatternMask::from_bits(0b1000).unwrap()),
            Err(Error::Supervision(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let r = total_loss(0.5, 0.2, 0.3, DEFAULT_LAMBDA, DEFAULT_ETA).unwrap();
        assert!((r.total - 0.55).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.1, 0.1).unwrap().total, 0.0);
        assert_eq!(total_loss(0.4, 0.7, 0.9, 0.0, 0.0).unwrap().total, 0.4);
        let err = total_loss(0.1, f64::NAN, 0.0, 0.1, 0.1).unwrap_err();
        assert!(err.to_string().contains("gen"));
    }

    proptest! {
        #[test]
        fn dice_in_unit_interval(raw in proptest::collection::vec(0.0f64..1.0, 4 * 8), codes in proptest::collection::vec(0usize..4, 8)) {
            // normalize to a per-voxel simplex
            let n = 8;
            let mut p = raw;
            for i in 0..n {
                let s: f64 = (0..4).map(|c| p[c * n + i]).sum::<f64>() + 1e-9;
                for c in 0..4 { p[c * n + i] /= s; }
            }
            let l = dice_loss_flat(&p, &one_hot(&codes, 4), 4);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        }

        #[test]
        fn ssim_in_range(a in proptest::collection::vec(-3.0f32..3.0, 16), b in proptest::collection::vec(-3.0f32..3.0, 16)) {
            let c = SsimConstants::for_target(&b);
            let l = ssim_loss(&a, &b, c).unwrap();
            prop_assert!((-1e-9..=2.0 + 1e-9).contains(&l));
        }
    }
}
