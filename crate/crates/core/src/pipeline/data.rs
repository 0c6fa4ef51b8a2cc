//! Subject directories on disk: synthesis, loading and splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volumes::{
    generate_phantom, load_subject, preprocess, read_header, save_subject, LabelVolume, MultiModalVolume,
    PhantomSpec,
};

/// One preprocessed, labelled subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub volume: MultiModalVolume,
    pub labels: LabelVolume,
    pub spacing: [f64; 3],
}

/// Write `count` phantoms as `subject-000`, `subject-001`, ...; phantom `i`
/// uses seed `seed + i`.
pub fn synthesize_dataset(dir: &Path, count: usize, spec: &PhantomSpec, seed: u64) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let phantom_spec = PhantomSpec { seed: s, ..spec.clone() };
        let (volume, labels) = generate_phantom(&phantom_spec, &mut rng)?;
        let path = dir.join(format!("subject-{i:03}"));
        save_subject(&volume, Some(&labels), &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Subject directories (those holding a header) under `dir`, sorted by name.
pub fn subject_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::volumes::HEADER_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Load, resample to `shape` and normalize every subject under `dir`.
///
/// Every subject must carry all four sequences and a label map, since the
/// generator target and the Dice loss need them.
pub fn load_dataset(dir: &Path, shape: [usize; 3]) -> Result<Vec<Subject>> {
    let dirs = subject_dirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("no subject directories under {}", dir.display())));
    }
    dirs.iter()
        .map(|d| {
            let header = read_header(d)?;
            let (volume, labels) = load_subject(d)?;
            if !volume.is_complete() {
                return Err(Error::Supervision(format!(
                    "subject {} lacks a sequence; training and evaluation need all four",
                    volume.subject_id
                )));
            }
            let labels = labels.ok_or_else(|| {
                Error::Supervision(format!("subject {} has no label map", volume.subject_id))
            })?;
            let (volume, labels) = preprocess(&volume, Some(&labels), shape)?;
            let spacing = (0..3).map(|k| header.voxel_size_mm[k] * header.shape[k] as f64 / shape[k] as f64);
            let spacing: Vec<f64> = spacing.collect();
            Ok(Subject {
                volume,
                labels: labels.expect("labels passed through"),
                spacing: [spacing[0], spacing[1], spacing[2]],
            })
        })
        .collect()
}

/// Seeded shuffle into (train, validation) index lists; the validation part
/// has `round(n · val_fraction)` subjects, at least one when `n ≥ 2`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}
