//! Multi-modal MR volumes, tumor labelmaps and the regions derived from them.

mod io;
mod phantom;
mod preprocess;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dropout::PatternMask;
use crate::error::{Error, Result};

pub use io::{load_subject, read_header, save_subject, SubjectHeader, HEADER_FILE, LABEL_FILE};
pub use phantom::{generate_phantom, PhantomSpec};
pub use preprocess::{preprocess, resample_labels, resample_trilinear, zscore_nonzero};

/// The four acquired MR sequences, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flair,
    T1,
    T1c,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    /// File stem used in subject directories.
    pub fn file_stem(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.file_stem().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Flair => "FLAIR",
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
        };
        f.write_str(s)
    }
}

/// Feature source slot: the four acquired sequences plus the generated M5.
///
/// Slot indices run 0..5 with M5 last; the correlation block relies on this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Acquired(Modality),
    /// Surrogate modality produced by the generator, never read from disk.
    M5,
}

impl Source {
    pub const ALL: [Source; 5] = [
        Source::Acquired(Modality::Flair),
        Source::Acquired(Modality::T1),
        Source::Acquired(Modality::T1c),
        Source::Acquired(Modality::T2),
        Source::M5,
    ];

    pub fn index(self) -> usize {
        match self {
            Source::Acquired(m) => m.index(),
            Source::M5 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Acquired(m) => m.file_stem(),
            Source::M5 => "m5",
        }
    }
}

/// Scalar 3D volume, `[depth, height, width]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }
}

fn check_len(shape: [usize; 3], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!("shape {shape:?} needs {n} voxels, got {len}")));
    }
    Ok(())
}

/// BraTS label codes.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NET_NCR: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 4;
pub const LABEL_CODES: [u8; 4] = [LABEL_BACKGROUND, LABEL_NET_NCR, LABEL_EDEMA, LABEL_ENHANCING];

/// Class index (0..4) of a label code, in `LABEL_CODES` order.
pub fn class_of_code(code: u8) -> Option<usize> {
    LABEL_CODES.iter().position(|&c| c == code)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    /// Rejects any code outside {0, 1, 2, 4}.
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_len(shape, data.len())?;
        if let Some(bad) = data.iter().find(|c| class_of_code(**c).is_none()) {
            return Err(Error::Integrity(format!("unknown label code {bad}")));
        }
        Ok(Self { shape, data })
    }

    pub fn background(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    /// One-hot `[4, D, H, W]` encoding in `LABEL_CODES` order.
    pub fn one_hot(&self) -> Vec<f32> {
        let n = self.data.len();
        let mut out = vec![0.0; 4 * n];
        for (i, &code) in self.data.iter().enumerate() {
            let c = class_of_code(code).expect("validated label code");
            out[c * n + i] = 1.0;
        }
        out
    }

    /// Inverse of [`LabelVolume::one_hot`] by per-voxel argmax over class maps.
    pub fn from_class_scores(shape: [usize; 3], scores: &[f32]) -> Self {
        let n: usize = shape.iter().product();
        let classes = scores.len() / n;
        let data = (0..n)
            .map(|i| {
                let best = (0..classes)
                    .max_by(|&a, &b| scores[a * n + i].total_cmp(&scores[b * n + i]).then(b.cmp(&a)))
                    .unwrap_or(0);
                LABEL_CODES[best]
            })
            .collect();
        Self { shape, data }
    }
}

/// Binary voxel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub shape: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![false; shape.iter().product()],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Every voxel set here is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Nested evaluation regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Whole tumor: codes {1, 2, 4}.
    WT,
    /// Tumor core: codes {1, 4}.
    TC,
    /// Enhancing tumor: code {4}.
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn contains_code(self, code: u8) -> bool {
        match self {
            Region::WT => matches!(code, LABEL_NET_NCR | LABEL_EDEMA | LABEL_ENHANCING),
            Region::TC => matches!(code, LABEL_NET_NCR | LABEL_ENHANCING),
            Region::ET => code == LABEL_ENHANCING,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub region: Region,
    pub mask: Mask,
}

/// WT, TC and ET masks, in that order.
pub fn labels_to_regions(labels: &LabelVolume) -> [RegionMask; 3] {
    Region::ALL.map(|region| RegionMask {
        region,
        mask: Mask {
            shape: labels.shape,
            data: labels.data.iter().map(|&c| region.contains_code(c)).collect(),
        },
    })
}

/// Co-registered volumes of one subject.
///
/// `volumes[m]` is `None` when the sequence was never acquired. A sequence
/// that is present as a zeroed volume but switched off in `availability` is
/// treated as missing everywhere downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    pub subject_id: String,
    pub shape: [usize; 3],
    pub volumes: [Option<Volume>; 4],
    pub availability: PatternMask,
}

impl MultiModalVolume {
    /// Builds a subject from the sequences that exist. At least one is required.
    pub fn new(subject_id: impl Into<String>, volumes: [Option<Volume>; 4]) -> Result<Self> {
        let shape = volumes
            .iter()
            .flatten()
            .map(|v| v.shape)
            .next()
            .ok_or_else(|| Error::Availability("subject has no modality".into()))?;
        for (m, v) in Modality::ALL.iter().zip(&volumes) {
            if let Some(v) = v {
                if v.shape != shape {
                    return Err(Error::Integrity(format!(
                        "{m} has shape {:?}, expected {shape:?}",
                        v.shape
                    )));
                }
            }
        }
        let present = volumes.each_ref().map(|v| v.is_some());
        let availability = PatternMask::from_present(present)?;
        Ok(Self {
            subject_id: subject_id.into(),
            shape,
            volumes,
            availability,
        })
    }

    pub fn get(&self, m: Modality) -> Option<&Volume> {
        self.volumes[m.index()].as_ref()
    }

    /// The volume if present and marked available.
    pub fn available(&self, m: Modality) -> Option<&Volume> {
        if self.availability.contains(m) {
            self.get(m)
        } else {
            None
        }
    }

    /// All four sequences available.
    pub fn is_complete(&self) -> bool {
        self.availability == PatternMask::FULL
    }
}
