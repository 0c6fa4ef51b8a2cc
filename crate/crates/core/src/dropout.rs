//! Modality dropout: availability patterns and how they are applied.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{Modality, MultiModalVolume, Volume};

/// Non-empty subset of the four acquired sequences.
///
/// The integer form packs (FLAIR, T1, T1c, T2) from the most significant of
/// four bits down, so `0b0001` is T2 alone and `0b1111` is everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PatternMask(u8);

/// Row order of the result tables: singles, pairs, triples, then all four.
const TABLE_ORDER: [u8; 15] = [
    0b0001, 0b0010, 0b0100, 0b1000, 0b0011, 0b0110, 0b1100, 0b0101, 0b1001, 0b1010, 0b1110,
    0b1101, 0b1011, 0b0111, 0b1111,
];

impl PatternMask {
    pub const FULL: PatternMask = PatternMask(0b1111);

    fn bit(m: Modality) -> u8 {
        0b1000 >> m.index()
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 0b1111 {
            return Err(Error::Availability(format!(
                "pattern bits {bits:#06b} must be a non-empty subset of 4 modalities"
            )));
        }
        Ok(Self(bits))
    }

    pub fn from_present(present: [bool; 4]) -> Result<Self> {
        let bits = Modality::ALL
            .iter()
            .zip(present)
            .filter(|(_, p)| *p)
            .fold(0, |acc, (m, _)| acc | Self::bit(*m));
        Self::from_bits(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & Self::bit(m) != 0
    }

    pub fn present(self) -> [bool; 4] {
        Modality::ALL.map(|m| self.contains(m))
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn missing(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| !self.contains(*m))
    }

    /// Position in [`enumerate_patterns`].
    pub fn table_index(self) -> usize {
        TABLE_ORDER.iter().position(|&b| b == self.0).expect("valid pattern")
    }

    /// `•` present, `◦` missing, in (FLAIR, T1, T1c, T2) order.
    pub fn symbols(self) -> String {
        Modality::ALL
            .iter()
            .map(|&m| if self.contains(m) { '•' } else { '◦' })
            .collect()
    }
}

impl From<PatternMask> for u8 {
    fn from(p: PatternMask) -> u8 {
        p.0
    }
}

impl TryFrom<u8> for PatternMask {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        Self::from_bits(bits)
    }
}

impl fmt::Display for PatternMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.symbols())
    }
}

impl FromStr for PatternMask {
    type Err = Error;

    /// Accepts the symbol form, a 4-character `0`/`1` string, or the integer form.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let chars: Vec<char> = s.chars().collect();
        if chars.len() == 4 && chars.iter().all(|c| matches!(c, '•' | '◦' | '0' | '1')) {
            let present = [0, 1, 2, 3].map(|i| matches!(chars[i], '•' | '1'));
            return Self::from_present(present);
        }
        let bits: u8 = s
            .parse()
            .map_err(|_| Error::Availability(format!("cannot parse pattern {s:?}")))?;
        Self::from_bits(bits)
    }
}

/// All 15 patterns in table order: T2 alone first, all four last.
pub fn enumerate_patterns() -> Vec<PatternMask> {
    TABLE_ORDER.iter().map(|&b| PatternMask(b)).collect()
}

/// Uniform draw over the 15 non-empty patterns.
pub fn sample_pattern<R: Rng + ?Sized>(rng: &mut R) -> PatternMask {
    PatternMask(TABLE_ORDER[rng.random_range(0..TABLE_ORDER.len())])
}

/// Zero out every sequence the pattern drops.
///
/// Fails if the pattern asks for a sequence the subject does not have.
pub fn apply_pattern(volume: &MultiModalVolume, pattern: PatternMask) -> Result<MultiModalVolume> {
    if let Some(m) = Modality::ALL
        .into_iter()
        .find(|&m| pattern.contains(m) && volume.available(m).is_none())
    {
        return Err(Error::Availability(format!(
            "pattern {pattern} needs {m}, which subject {} lacks",
            volume.subject_id
        )));
    }
    let volumes = Modality::ALL.map(|m| {
        if pattern.contains(m) {
            volume.get(m).cloned()
        } else {
            Some(Volume::zeros(volume.shape))
        }
    });
    Ok(MultiModalVolume {
        subject_id: volume.subject_id.clone(),
        shape: volume.shape,
        volumes,
        availability: pattern,
    })
}
