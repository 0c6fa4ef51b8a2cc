//! Subject directory layout:
//!
//! ```text
//! <id>/header.json
//! <id>/{flair,t1,t1c,t2}.f32   raw little-endian float32, one per present sequence
//! <id>/labels.u8               optional, one byte per voxel
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelVolume, Modality, MultiModalVolume, Volume, LABEL_CODES};
use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "header.json";
pub const LABEL_FILE: &str = "labels.u8";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectHeader {
    pub subject_id: String,
    pub shape: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub modalities: Vec<Modality>,
    pub label_codes: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_header(dir: &Path) -> Result<SubjectHeader> {
    let header_path = dir.join(HEADER_FILE);
    if !header_path.is_file() {
        return Err(Error::Format(format!("missing {}", header_path.display())));
    }
    let header: SubjectHeader = serde_json::from_slice(&read(&header_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", header_path.display())))?;
    if header.shape.contains(&0) {
        return Err(Error::Format(format!("degenerate shape {:?}", header.shape)));
    }
    Ok(header)
}

/// Reads a subject written by [`save_subject`].
///
/// Availability follows the modality files actually present, not the header list.
pub fn load_subject(dir: &Path) -> Result<(MultiModalVolume, Option<LabelVolume>)> {
    let header = read_header(dir)?;
    let n: usize = header.shape.iter().product();

    let mut volumes: [Option<Volume>; 4] = Default::default();
    for m in Modality::ALL {
        let path = dir.join(format!("{}.f32", m.file_stem()));
        if !path.is_file() {
            continue;
        }
        let bytes = read(&path)?;
        if bytes.len() != 4 * n {
            return Err(Error::Integrity(format!(
                "{} holds {} bytes, header shape {:?} needs {}",
                path.display(),
                bytes.len(),
                header.shape,
                4 * n
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        volumes[m.index()] = Some(Volume::new(header.shape, data)?);
    }
    let volume = MultiModalVolume::new(header.subject_id.clone(), volumes)?;

    let label_path = dir.join(LABEL_FILE);
    let labels = if label_path.is_file() {
        let bytes = read(&label_path)?;
        if bytes.len() != n {
            return Err(Error::Integrity(format!(
                "{} holds {} voxels, expected {n}",
                label_path.display(),
                bytes.len()
            )));
        }
        Some(LabelVolume::new(header.shape, bytes)?)
    } else {
        None
    };
    Ok((volume, labels))
}

/// Writes only the modalities marked available.
pub fn save_subject(volume: &MultiModalVolume, labels: Option<&LabelVolume>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(l) = labels {
        if l.shape != volume.shape {
            return Err(Error::Integrity(format!(
                "labels {:?} vs volumes {:?}",
                l.shape, volume.shape
            )));
        }
    }
    let mut present = Vec::new();
    for m in Modality::ALL {
        let path = dir.join(format!("{}.f32", m.file_stem()));
        match volume.available(m) {
            Some(v) => {
                let bytes: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                present.push(m);
            }
            None if path.exists() => {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
            None => {}
        }
    }
    if let Some(l) = labels {
        let path = dir.join(LABEL_FILE);
        fs::write(&path, &l.data).map_err(|e| Error::io(&path, e))?;
    }
    let header = SubjectHeader {
        subject_id: volume.subject_id.clone(),
        shape: volume.shape,
        voxel_size_mm: [1.0; 3],
        modalities: present,
        label_codes: LABEL_CODES.to_vec(),
    };
    let path = dir.join(HEADER_FILE);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
