use super::{LabelVolume, Modality, MultiModalVolume, Volume};
use crate::error::{Error, Result};

/// Source coordinate of output voxel `o` under half-voxel-centred scaling.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    s.clamp(0.0, (n_in - 1) as f64)
}

fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|o| {
            let s = source_coord(o, n_in, n_out);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// Trilinear resampling. Identity when `target == volume.shape`.
pub fn resample_trilinear(volume: &Volume, target: [usize; 3]) -> Volume {
    if volume.shape == target {
        return volume.clone();
    }
    let [d, h, w] = volume.shape;
    let (wz, wy, wx) = (
        axis_weights(d, target[0]),
        axis_weights(h, target[1]),
        axis_weights(w, target[2]),
    );
    let src = &volume.data;
    let at = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
    let mut out = Vec::with_capacity(target.iter().product());
    for &(z0, z1, fz) in &wz {
        for &(y0, y1, fy) in &wy {
            for &(x0, x1, fx) in &wx {
                let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                out.push(c0 * (1.0 - fz) + c1 * fz);
            }
        }
    }
    Volume { shape: target, data: out }
}

/// Nearest-neighbour label resampling; never introduces a new code.
pub fn resample_labels(labels: &LabelVolume, target: [usize; 3]) -> LabelVolume {
    if labels.shape == target {
        return labels.clone();
    }
    let [d, h, w] = labels.shape;
    let nearest = |n_in: usize, n_out: usize| -> Vec<usize> {
        (0..n_out)
            .map(|o| (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1))
            .collect()
    };
    let (iz, iy, ix) = (nearest(d, target[0]), nearest(h, target[1]), nearest(w, target[2]));
    let mut data = Vec::with_capacity(target.iter().product());
    for &z in &iz {
        for &y in &iy {
            for &x in &ix {
                data.push(labels.data[(z * h + y) * w + x]);
            }
        }
    }
    LabelVolume { shape: target, data }
}

/// Zero-mean, unit-variance scaling over nonzero (brain) voxels; background
/// stays exactly zero.
pub fn zscore_nonzero(volume: &Volume) -> Result<Volume> {
    let brain = || volume.data.iter().filter(|v| **v != 0.0).map(|&v| v as f64);
    let n = brain().count();
    if n == 0 {
        return Err(Error::Normalization("volume has no nonzero voxels".into()));
    }
    let mean = brain().sum::<f64>() / n as f64;
    let std = (brain().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std <= f64::EPSILON * mean.abs().max(1.0) {
        return Err(Error::Normalization("zero standard deviation over nonzero voxels".into()));
    }
    let data = volume
        .data
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((v as f64 - mean) / std) as f32 })
        .collect();
    Ok(Volume {
        shape: volume.shape,
        data,
    })
}

/// Resample every sequence to `target` and normalize the available ones.
pub fn preprocess(
    volume: &MultiModalVolume,
    labels: Option<&LabelVolume>,
    target: [usize; 3],
) -> Result<(MultiModalVolume, Option<LabelVolume>)> {
    if target.contains(&0) {
        return Err(Error::Config(format!("target shape {target:?} must be positive")));
    }
    let mut volumes: [Option<Volume>; 4] = Default::default();
    for m in Modality::ALL {
        if let Some(v) = volume.get(m) {
            let resized = resample_trilinear(v, target);
            volumes[m.index()] = Some(if volume.availability.contains(m) {
                zscore_nonzero(&resized).map_err(|e| match e {
                    Error::Normalization(msg) => Error::Normalization(format!("{m}: {msg}")),
                    other => other,
                })?
            } else {
                resized
            });
        }
    }
    let out = MultiModalVolume {
        subject_id: volume.subject_id.clone(),
        shape: target,
        volumes,
        availability: volume.availability,
    };
    Ok((out, labels.map(|l| resample_labels(l, target))))
}
