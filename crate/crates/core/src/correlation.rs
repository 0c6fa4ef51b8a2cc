//! Correlation constraint block.
//!
//! Each of the five bottleneck representations (four acquired sequences plus
//! the generated M5) is re-expressed as a per-channel linear combination of
//! the other four:
//!
//! ```text
//! F_i = α_i ⊙ f_j + β_i ⊙ f_k + γ_i ⊙ f_l + δ_i ⊙ f_m + σ_i
//! ```
//!
//! with `(j, k, l, m)` the remaining slots in ascending order and the weights
//! `Γ_i` estimated from `f_i` by a two-layer perceptron. The constraint loss
//! sums `KL(P(f_i) ‖ Q(F_i))` over the five slots, where both distributions
//! are softmaxes over the flattened map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Number of feature sources taking part in the constraint.
pub const SOURCES: usize = 5;

/// Per-channel weights `Γ_i = (α, β, γ, δ, σ)`, all of length C.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl CorrelationParams {
    pub fn zeros(channels: usize) -> Self {
        let z = vec![0.0; channels];
        Self {
            alpha: z.clone(),
            beta: z.clone(),
            gamma: z.clone(),
            delta: z.clone(),
            sigma: z,
        }
    }

    /// Splits a `[α | β | γ | δ | σ]` vector of length `5·C`.
    pub fn from_flat(flat: &[f64], channels: usize) -> Result<Self> {
        if flat.len() != SOURCES * channels {
            return Err(Error::Shape(format!(
                "correlation weights need {} values for {channels} channels, got {}",
                SOURCES * channels,
                flat.len()
            )));
        }
        let part = |k: usize| flat[k * channels..(k + 1) * channels].to_vec();
        Ok(Self {
            alpha: part(0),
            beta: part(1),
            gamma: part(2),
            delta: part(3),
            sigma: part(4),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [&self.alpha, &self.beta, &self.gamma, &self.delta, &self.sigma]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    /// Weights applied to the four sources, in source order.
    pub fn weights(&self) -> [&[f64]; 4] {
        [&self.alpha, &self.beta, &self.gamma, &self.delta]
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Slots `(j, k, l, m)` feeding `F_i`: every slot except `i`, ascending.
pub fn source_order(i: usize) -> [usize; 4] {
    assert!(i < SOURCES, "slot {i} out of range");
    let mut out = [0; 4];
    let mut k = 0;
    for s in (0..SOURCES).filter(|&s| s != i) {
        out[k] = s;
        k += 1;
    }
    out
}

/// Two fully connected layers from a pooled bottleneck to `Γ_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CpemWeights {
    /// `[C, C]`
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    /// `[5C, C]`
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

pub(crate) const CPEM_SLOPE: f32 = 0.01;

/// Global-average-pool `feature` and map it to correlation weights.
pub fn cpem_forward(weights: &CpemWeights, feature: &Tensor) -> Result<CorrelationParams> {
    let c = weights.fc1_w.shape()[1];
    if feature.channels() != c {
        return Err(Error::Shape(format!(
            "estimator expects {c} channels, feature map has {}",
            feature.channels()
        )));
    }
    let n = feature.per_channel();
    let pooled: Vec<f32> = feature
        .data()
        .chunks(n)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
        .collect();
    let dense = |w: &Tensor, b: &Tensor, x: &[f32]| -> Vec<f32> {
        let nin = w.shape()[1];
        (0..w.shape()[0])
            .map(|o| {
                b.data()[o]
                    + w.data()[o * nin..(o + 1) * nin]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
            })
            .collect()
    };
    let hidden: Vec<f32> = dense(&weights.fc1_w, &weights.fc1_b, &pooled)
        .into_iter()
        .map(|v| if v > 0.0 { v } else { CPEM_SLOPE * v })
        .collect();
    let out = dense(&weights.fc2_w, &weights.fc2_b, &hidden);
    CorrelationParams::from_flat(&out.iter().map(|&v| v as f64).collect::<Vec<_>>(), c)
}

fn check_sources(sources: &[&[f64]; 4], channels: usize) -> Result<usize> {
    let len = sources[0].len();
    if channels == 0 || len % channels != 0 || sources.iter().any(|s| s.len() != len) {
        return Err(Error::Shape(format!(
            "correlation sources must share a [{channels}, ...] shape"
        )));
    }
    Ok(len / channels)
}

/// Linear correlated representation on flat `[C, S]` maps.
pub fn lcem_forward_flat(params: &CorrelationParams, sources: [&[f64]; 4], channels: usize) -> Result<Vec<f64>> {
    if params.channels() != channels {
        return Err(Error::Shape(format!(
            "weights have {} channels, maps have {channels}",
            params.channels()
        )));
    }
    let s = check_sources(&sources, channels)?;
    let mut out = vec![0.0; channels * s];
    for c in 0..channels {
        let row = &mut out[c * s..(c + 1) * s];
        row.fill(params.sigma[c]);
        for (w, src) in params.weights().iter().zip(&sources) {
            let wc = w[c];
            for (o, &v) in row.iter_mut().zip(&src[c * s..(c + 1) * s]) {
                *o += wc * v;
            }
        }
    }
    Ok(out)
}

/// [`lcem_forward_flat`] on `[C, D, H, W]` tensors.
pub fn lcem_forward(params: &CorrelationParams, sources: [&Tensor; 4]) -> Result<Tensor> {
    let shape = sources[0].shape().to_vec();
    if sources.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(Error::Shape("correlation sources differ in shape".into()));
    }
    let maps = sources.map(|t| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let out = lcem_forward_flat(
        params,
        [&maps[0], &maps[1], &maps[2], &maps[3]],
        sources[0].channels(),
    )?;
    Tensor::from_vec(&shape, out.into_iter().map(|v| v as f32).collect())
}

pub struct LcemGrads {
    pub params: CorrelationParams,
    pub sources: [Vec<f64>; 4],
}

/// Adjoint of [`lcem_forward_flat`] for upstream gradient `dout`.
pub fn lcem_backward_flat(
    params: &CorrelationParams,
    sources: [&[f64]; 4],
    dout: &[f64],
    channels: usize,
) -> LcemGrads {
    let s = dout.len() / channels;
    let mut dparams = CorrelationParams::zeros(channels);
    let mut dsrc: [Vec<f64>; 4] = Default::default();
    for d in &mut dsrc {
        *d = vec![0.0; dout.len()];
    }
    for c in 0..channels {
        let g = &dout[c * s..(c + 1) * s];
        dparams.sigma[c] = g.iter().sum();
        let dw = [
            &mut dparams.alpha,
            &mut dparams.beta,
            &mut dparams.gamma,
            &mut dparams.delta,
        ];
        for (k, w) in dw.into_iter().enumerate() {
            let src = &sources[k][c * s..(c + 1) * s];
            w[c] = g.iter().zip(src).map(|(a, b)| a * b).sum();
            let wc = params.weights()[k][c];
            for (d, &gv) in dsrc[k][c * s..(c + 1) * s].iter_mut().zip(g) {
                *d = wc * gv;
            }
        }
    }
    LcemGrads {
        params: dparams,
        sources: dsrc,
    }
}

/// Strictly positive probability vector summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDistribution {
    pub probabilities: Vec<f64>,
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Softmax (temperature 1) over the flattened map.
pub fn feature_to_distribution(map: &[f64]) -> Result<FeatureDistribution> {
    if map.is_empty() {
        return Err(Error::Numeric("empty feature map".into()));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("feature map contains NaN or infinity".into()));
    }
    Ok(FeatureDistribution {
        probabilities: log_softmax(map).into_iter().map(f64::exp).collect(),
    })
}

/// `Σ p log(p / q)` for two explicit distributions.
pub fn kl_divergence(p: &FeatureDistribution, q: &FeatureDistribution) -> Result<f64> {
    if p.probabilities.len() != q.probabilities.len() {
        return Err(Error::Shape("distributions differ in length".into()));
    }
    Ok(p.probabilities
        .iter()
        .zip(&q.probabilities)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum())
}

/// `KL(softmax(p) ‖ softmax(q))` computed in log space.
pub fn kl_from_logits(p: &[f64], q: &[f64]) -> f64 {
    let (lp, lq) = (log_softmax(p), log_softmax(q));
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Gradients of [`kl_from_logits`] with respect to `p` and `q`.
pub fn kl_from_logits_grad(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (lp, lq) = (log_softmax(p), log_softmax(q));
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    let dp = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b - kl))
        .collect();
    let dq = lp.iter().zip(&lq).map(|(a, b)| b.exp() - a.exp()).collect();
    (dp, dq)
}

/// Correlation constraint loss: `Σ_i KL(P(f_i) ‖ Q(F_i))` over matched pairs.
pub fn ccl_loss(originals: &[Tensor], correlated: &[Tensor]) -> Result<f64> {
    if originals.len() != correlated.len() || originals.is_empty() {
        return Err(Error::Shape(format!(
            "{} original maps vs {} correlated maps",
            originals.len(),
            correlated.len()
        )));
    }
    let mut total = 0.0;
    for (f, g) in originals.iter().zip(correlated) {
        if f.shape() != g.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", f.shape(), g.shape())));
        }
        let fv: Vec<f64> = f.data().iter().map(|&v| v as f64).collect();
        let gv: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
        if fv.iter().chain(&gv).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature map".into()));
        }
        total += kl_from_logits(&fv, &gv);
    }
    Ok(total)
}

/// Joint intensity histogram of two co-registered volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointHistogram {
    pub bins: usize,
    /// `counts[i][j]`: first volume in bin `i`, second in bin `j`.
    pub counts: Vec<Vec<u64>>,
    pub range_a: (f64, f64),
    pub range_b: (f64, f64),
    pub pearson: f64,
    pub voxels: usize,
}

/// Histogram and Pearson correlation over voxels nonzero in either volume.
pub fn joint_intensity_histogram(a: &[f32], b: &[f32], bins: usize) -> Result<JointHistogram> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} voxels", a.len(), b.len())));
    }
    if bins < 2 {
        return Err(Error::Statistics("need at least 2 bins".into()));
    }
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x != 0.0 || **y != 0.0)
        .map(|(&x, &y)| (x as f64, y as f64))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Statistics(format!(
            "{} nonzero voxels, need at least 2",
            pairs.len()
        )));
    }
    let range = |sel: fn(&(f64, f64)) -> f64| {
        pairs
            .iter()
            .map(sel)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (range_a, range_b) = (range(|p| p.0), range(|p| p.1));
    let bin = |v: f64, (lo, hi): (f64, f64)| -> usize {
        if hi <= lo {
            return 0;
        }
        (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
    };
    let mut counts = vec![vec![0u64; bins]; bins];
    for &(x, y) in &pairs {
        counts[bin(x, range_a)][bin(y, range_b)] += 1;
    }
    let n = pairs.len() as f64;
    let (ma, mb) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Statistics("constant intensities, correlation undefined".into()));
    }
    Ok(JointHistogram {
        bins,
        counts,
        range_a,
        range_b,
        pearson: cov / (va * vb).sqrt(),
        voxels: pairs.len(),
    })
}

impl JointHistogram {
    /// Count matrix as CSV, one row per bin of the first volume.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Log-scaled 8-bit grayscale PGM; first volume on the horizontal axis,
    /// second increasing upwards.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.counts.iter().flatten().copied().max().unwrap_or(0) as f64;
        let scale = if max > 0.0 { 255.0 / (1.0 + max).ln() } else { 0.0 };
        let mut out = format!("P5\n{} {}\n255\n", self.bins, self.bins).into_bytes();
        for j in (0..self.bins).rev() {
            for i in 0..self.bins {
                let c = self.counts[i][j] as f64;
                out.push(((1.0 + c).ln() * scale).round() as u8);
            }
        }
        out
    }
}
