//! Two-stage redundancy control for passive screen observations.
//!
//! Stage 1 runs before any analysis: a 256-bit block-mean perceptual hash is
//! compared against recently accepted hashes and near-duplicates are dropped.
//! Stage 2 runs after placement: if the analyzer judged the new observation
//! highly related to a recent visible observation or snippet, it is hidden
//! from the canvas but stays retrievable.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::FilterError;
use crate::model::{MemoryId, RelevanceJudgment, Source};
use crate::tree::MemoryTree;

/// Cells per side of the hash grid.
pub const GRID: usize = 16;
pub const HASH_BITS: usize = GRID * GRID;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilterConfig {
    /// Maximum Hamming distance still treated as a duplicate (inclusive).
    pub dedup_hamming: u32,
    /// Minimum related score that hides a new observation (inclusive).
    pub autohide_sigma: f64,
    /// How many recent visible memories stage 2 compares against.
    pub autohide_window: usize,
    /// Accepted hashes remembered by stage 1.
    pub ring_capacity: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            dedup_hamming: 10,
            autohide_sigma: 0.65,
            autohide_window: 30,
            ring_capacity: 500,
        }
    }
}

/// 256-bit perceptual hash. Bit `j` is cell `j` of the 16x16 grid in
/// row-major order, stored most-significant-bit first.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerceptualHash([u8; HASH_BITS / 8]);

impl PerceptualHash {
    pub const ZERO: PerceptualHash = PerceptualHash([0; HASH_BITS / 8]);

    pub fn from_bytes(bytes: [u8; HASH_BITS / 8]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; HASH_BITS / 8] {
        &self.0
    }

    pub fn bit(&self, j: usize) -> bool {
        self.0[j / 8] & (0x80 >> (j % 8)) != 0
    }

    pub fn set_bit(&mut self, j: usize, value: bool) {
        let mask = 0x80 >> (j % 8);
        if value {
            self.0[j / 8] |= mask;
        } else {
            self.0[j / 8] &= !mask;
        }
    }

    pub fn complement(&self) -> Self {
        let mut out = *self;
        for b in &mut out.0 {
            *b = !*b;
        }
        out
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, FilterError> {
        let bytes = hex::decode(s.trim()).map_err(|e| FilterError::Argument(format!("bad hash hex: {e}")))?;
        let arr: [u8; HASH_BITS / 8] = bytes
            .try_into()
            .map_err(|_| FilterError::Argument("hash must be 64 hex characters".into()))?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PerceptualHash({})", self.to_hex())
    }
}

impl fmt::Display for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for PerceptualHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PerceptualHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PerceptualHash::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Number of differing bits.
pub fn hamming(a: &PerceptualHash, b: &PerceptualHash) -> u32 {
    a.0.iter().zip(b.0.iter()).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// BT.601 luma with integer rounding.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Decodes a PNG or JPEG and hashes it.
pub fn phash(image_bytes: &[u8]) -> Result<PerceptualHash, FilterError> {
    let img = image::load_from_memory(image_bytes).map_err(|e| FilterError::Format(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    phash_rgb(w as usize, h as usize, rgb.as_raw())
}

/// Hashes a packed RGB8 buffer.
pub fn phash_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<PerceptualHash, FilterError> {
    if width < GRID || height < GRID {
        return Err(FilterError::Argument(format!(
            "image is {width}x{height}, needs at least {GRID}x{GRID}"
        )));
    }
    if rgb.len() != width * height * 3 {
        return Err(FilterError::Argument("rgb buffer length does not match dimensions".into()));
    }
    let lumas: Vec<u8> = rgb.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
    Ok(phash_luma(width, height, &lumas))
}

/// Area-averaged 16x16 downsample followed by median thresholding.
///
/// Coordinates are scaled by 16 so every pixel spans 16 units and every cell
/// spans `width` (or `height`) units; overlaps are then exact integers and
/// cell sums compare exactly.
fn phash_luma(width: usize, height: usize, lumas: &[u8]) -> PerceptualHash {
    let wx = overlap_table(width);
    let wy = overlap_table(height);

    let mut cells = [0u64; HASH_BITS];
    for (cy, rows) in wy.iter().enumerate() {
        // Row-weighted column sums for this cell row.
        let mut col = vec![0u64; width];
        for &(y, wyv) in rows {
            let row = &lumas[y * width..(y + 1) * width];
            for (c, &l) in col.iter_mut().zip(row) {
                *c += l as u64 * wyv;
            }
        }
        for (cx, cols) in wx.iter().enumerate() {
            cells[cy * GRID + cx] = cols.iter().map(|&(x, wxv)| col[x] * wxv).sum();
        }
    }

    let mut sorted = cells;
    sorted.sort_unstable();
    // Median of 256 values is the mean of the two middle ones; compare doubled.
    let twice_median = sorted[HASH_BITS / 2 - 1] + sorted[HASH_BITS / 2];
    let mut hash = PerceptualHash::ZERO;
    for (j, &c) in cells.iter().enumerate() {
        hash.set_bit(j, 2 * c > twice_median);
    }
    hash
}

/// For each of the 16 cells along one axis, the pixels it covers and by how
/// many scaled units.
fn overlap_table(len: usize) -> Vec<Vec<(usize, u64)>> {
    (0..GRID)
        .map(|cell| {
            let lo = cell * len;
            let hi = (cell + 1) * len;
            let first = lo / GRID;
            let last = (hi - 1) / GRID;
            (first..=last)
                .filter_map(|p| {
                    let plo = p * GRID;
                    let phi = plo + GRID;
                    let w = hi.min(phi).saturating_sub(lo.max(plo));
                    (w > 0).then_some((p, w as u64))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterStage {
    Dedup,
    Autohide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterOutcome {
    Keep,
    Discard,
    Hide,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilterEvidence {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_hamming: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_id: Option<MemoryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilterDecision {
    pub stage: FilterStage,
    pub outcome: FilterOutcome,
    pub evidence: FilterEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AcceptedHash {
    pub hash: PerceptualHash,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_id: Option<MemoryId>,
}

/// Bounded memory of accepted observation hashes, oldest evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupRing {
    capacity: usize,
    accepted: VecDeque<AcceptedHash>,
}

impl DedupRing {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            accepted: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AcceptedHash> {
        self.accepted.iter()
    }

    pub fn accept(&mut self, hash: PerceptualHash, memory_id: Option<MemoryId>) {
        if self.accepted.len() == self.capacity {
            self.accepted.pop_front();
        }
        self.accepted.push_back(AcceptedHash { hash, memory_id });
    }

    /// Stage 1 decision for a new hash against the ring.
    pub fn check(&self, hash: &PerceptualHash, max_distance: u32) -> FilterDecision {
        let entries: Vec<_> = self.accepted.iter().map(|a| (a.hash, a.memory_id.clone())).collect();
        stage1_dedup(hash, &entries, max_distance)
    }
}

/// Discards `new_hash` iff some accepted hash lies within `max_distance`.
/// On equal distances the most recently accepted hash is reported.
pub fn stage1_dedup(new_hash: &PerceptualHash, accepted: &[(PerceptualHash, Option<MemoryId>)], max_distance: u32) -> FilterDecision {
    let closest = accepted
        .iter()
        .enumerate()
        .map(|(i, (h, id))| (hamming(new_hash, h), i, id))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let (outcome, evidence) = match closest {
        None => (FilterOutcome::Keep, FilterEvidence::default()),
        Some((d, _, id)) => (
            if d <= max_distance {
                FilterOutcome::Discard
            } else {
                FilterOutcome::Keep
            },
            FilterEvidence {
                min_hamming: Some(d),
                max_sigma: None,
                matched_id: id.clone(),
            },
        ),
    };
    FilterDecision {
        stage: FilterStage::Dedup,
        outcome,
        evidence,
    }
}

/// Stage 2 decision for an observation that is already in the tree.
///
/// Only judgments on the `window` most recent visible, non-archived
/// observations and snippets (the new memory excluded) count. The decision is
/// returned; hiding is left to the caller.
pub fn stage2_autohide(
    tree: &MemoryTree,
    new_memory: &MemoryId,
    judgments: &[RelevanceJudgment],
    config: &FilterConfig,
) -> Result<FilterDecision, FilterError> {
    let item = tree
        .memory(new_memory)
        .ok_or_else(|| FilterError::Argument(format!("unknown memory {new_memory}")))?;
    if item.source != Source::Observation {
        return Err(FilterError::Argument(format!(
            "auto-hide applies to observations, {new_memory} is a {}",
            item.source
        )));
    }
    let mut candidates: Vec<_> = tree
        .memories()
        .filter(|m| &m.id != new_memory)
        .filter(|m| !m.hidden && !m.archived)
        .filter(|m| matches!(m.source, Source::Observation | Source::Snippet))
        .collect();
    candidates.sort_by(|a, b| b.sequence.cmp(&a.sequence));
    candidates.truncate(config.autohide_window);

    let best = judgments
        .iter()
        .filter(|j| candidates.iter().any(|m| m.id == j.related_id))
        .max_by(|a, b| a.score.total_cmp(&b.score));

    let (outcome, evidence) = match best {
        None => (FilterOutcome::Keep, FilterEvidence::default()),
        Some(j) => (
            if j.score >= config.autohide_sigma {
                FilterOutcome::Hide
            } else {
                FilterOutcome::Keep
            },
            FilterEvidence {
                min_hamming: None,
                max_sigma: Some(j.score),
                matched_id: Some(j.related_id.clone()),
            },
        ),
    };
    Ok(FilterDecision {
        stage: FilterStage::Autohide,
        outcome,
        evidence,
    })
}
