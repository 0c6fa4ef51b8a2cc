//! Synthetic subjects whose sequences are linear mixtures of shared latent
//! tissue maps, so cross-modality intensity correlation is known by construction.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, Modality, MultiModalVolume, Volume, LABEL_EDEMA, LABEL_ENHANCING, LABEL_NET_NCR};
use crate::error::{Error, Result};

/// Latent order: smooth brain tissue, whole-tumor, tumor-core and enhancing indicators.
pub const MAX_LATENTS: usize = 4;

// Normalized-radius shells of one tumor: necrotic centre, enhancing rim, edema.
const NCR_RADIUS: f64 = 0.4;
const ENHANCING_RADIUS: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub tumor_count: usize,
    /// Range of the outer (edema) semi-axis, in voxels.
    pub tumor_radius: (f64, f64),
    pub latent_count: usize,
    /// One row per acquired sequence (FLAIR, T1, T1c, T2), `latent_count` columns.
    pub mixing: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            tumor_count: 1,
            tumor_radius: (6.0, 9.0),
            latent_count: 4,
            // FLAIR shows the whole tumor, T1c the core and rim, T1 barely anything.
            mixing: vec![
                vec![1.0, 1.4, 0.2, 0.1],
                vec![1.0, -0.25, -0.1, 0.05],
                vec![1.0, 0.1, 0.5, 1.2],
                vec![1.0, 0.9, 0.6, -0.2],
            ],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 4) {
            return Err(Error::Spec(format!("shape {:?} too small", self.shape)));
        }
        if !(1..=MAX_LATENTS).contains(&self.latent_count) {
            return Err(Error::Spec(format!("latent_count must be 1..={MAX_LATENTS}")));
        }
        if self.mixing.len() != 4 || self.mixing.iter().any(|r| r.len() != self.latent_count) {
            return Err(Error::Spec(format!(
                "mixing matrix must be 4 x {}",
                self.latent_count
            )));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if self.mixing[i] == self.mixing[j] {
                    return Err(Error::Spec(format!("mixing rows {i} and {j} are identical")));
                }
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec("noise sigma must be >= 0".into()));
        }
        let (lo, hi) = self.tumor_radius;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Spec(format!("bad tumor radius range {lo}..{hi}")));
        }
        let min_dim = *self.shape.iter().min().expect("3 dims") as f64;
        // Largest semi-axis after the ±20% per-axis jitter must fit inside the brain.
        if hi * 1.2 > 0.4 * min_dim {
            return Err(Error::Spec(format!(
                "tumor radius {hi} exceeds shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Sum of random low-frequency plane waves, roughly unit variance.
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn new<R: Rng + ?Sized>(rng: &mut R, shape: [usize; 3], waves: usize) -> Self {
        let waves = (0..waves)
            .map(|_| {
                let k = [0, 1, 2].map(|a| {
                    let cycles = rng.random_range(-2.0..2.0);
                    2.0 * PI * cycles / shape[a] as f64
                });
                (k, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
            })
            .collect::<Vec<_>>();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let norm = (self.waves.len() as f64 / 2.0).sqrt().max(1.0);
        self.waves
            .iter()
            .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum::<f64>()
            / norm
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Draws one labelled subject. Equal `(spec, rng state)` gives identical output.
pub fn generate_phantom<R: Rng + ?Sized>(
    spec: &PhantomSpec,
    rng: &mut R,
) -> Result<(MultiModalVolume, LabelVolume)> {
    spec.validate()?;
    let shape = spec.shape;
    let dims = shape.map(|n| n as f64);
    let brain = Ellipsoid {
        center: dims.map(|n| n / 2.0 - 0.5),
        axes: dims.map(|n| n * rng.random_range(0.42..0.48)),
    };
    let field = SmoothField::new(rng, shape, 6);
    let tumors: Vec<Ellipsoid> = (0..spec.tumor_count)
        .map(|_| {
            let r = rng.random_range(spec.tumor_radius.0..=spec.tumor_radius.1);
            let axes = [0, 1, 2].map(|_| r * rng.random_range(0.8..1.2));
            let center = [0, 1, 2].map(|a| {
                let slack = (brain.axes[a] - axes[a]).max(0.0) * 0.5;
                brain.center[a] + rng.random_range(-slack..=slack)
            });
            Ellipsoid { center, axes }
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma validated");

    let n: usize = shape.iter().product();
    let mut labels = vec![0u8; n];
    let mut channels: [Vec<f32>; 4] = Default::default();
    for c in &mut channels {
        c.reserve(n);
    }
    let mut i = 0;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [z as f64, y as f64, x as f64];
                let inside = brain.radius(p) <= 1.0;
                let code = if inside {
                    tumor_code(&tumors, p)
                } else {
                    0
                };
                labels[i] = code;
                let latents = [
                    if inside { 1.0 + 0.3 * field.at(p) } else { 0.0 },
                    f64::from(u8::from(code != 0)),
                    f64::from(u8::from(code == LABEL_NET_NCR || code == LABEL_ENHANCING)),
                    f64::from(u8::from(code == LABEL_ENHANCING)),
                ];
                for (m, ch) in channels.iter_mut().enumerate() {
                    let v = if inside {
                        let clean: f64 = spec.mixing[m]
                            .iter()
                            .zip(&latents)
                            .map(|(w, l)| w * l)
                            .sum();
                        let eps = if spec.noise_sigma > 0.0 {
                            noise.sample(rng)
                        } else {
                            0.0
                        };
                        clean + eps
                    } else {
                        0.0
                    };
                    ch.push(v as f32);
                }
                i += 1;
            }
        }
    }

    let volumes = channels.map(|data| Some(Volume { shape, data }));
    let volume = MultiModalVolume::new(format!("phantom-{}", spec.seed), volumes)?;
    debug_assert_eq!(Modality::ALL.len(), 4);
    Ok((volume, LabelVolume { shape, data: labels }))
}

/// Innermost shell over all tumors wins, so overlapping tumors stay nested.
fn tumor_code(tumors: &[Ellipsoid], p: [f64; 3]) -> u8 {
    let r = tumors.iter().map(|t| t.radius(p)).fold(f64::INFINITY, f64::min);
    if r < NCR_RADIUS {
        LABEL_NET_NCR
    } else if r < ENHANCING_RADIUS {
        LABEL_ENHANCING
    } else if r <= 1.0 {
        LABEL_EDEMA
    } else {
        0
    }
}
