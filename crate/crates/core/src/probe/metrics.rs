//! Similarity metrics used by the probe gates and calibration.

use std::collections::BTreeSet;
use std::io::Write;

use flate2::{Compression, GzBuilder};

use crate::error::ProbeError;
use crate::retrieval::tokenize_seq;

/// Deflate level for every compressed-length measurement.
pub const GZIP_LEVEL: u32 = 6;

/// |A ∩ B| / |A ∪ B|; two empty sets are identical (1.0).
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Length of the gzip member (RFC 1952, no file name, zero mtime).
pub fn gzip_len(data: &[u8]) -> usize {
    let mut enc = GzBuilder::new().mtime(0).write(Vec::new(), Compression::new(GZIP_LEVEL));
    enc.write_all(data).expect("in-memory write");
    enc.finish().expect("in-memory finish").len()
}

/// Normalized compression distance, concatenating in argument order.
pub fn ncd(a: &[u8], b: &[u8]) -> Result<f64, ProbeError> {
    if a.is_empty() || b.is_empty() {
        return Err(ProbeError::Argument("ncd inputs must be non-empty".into()));
    }
    let za = gzip_len(a);
    let zb = gzip_len(b);
    let mut joined = Vec::with_capacity(a.len() + b.len());
    joined.extend_from_slice(a);
    joined.extend_from_slice(b);
    let zab = gzip_len(&joined);
    Ok((zab as f64 - za.min(zb) as f64) / za.max(zb) as f64)
}

/// Longest common subsequence length over two token sequences.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1) over word tokens. Two token-less texts score 1.0.
pub fn rouge_l(a: &str, b: &str) -> f64 {
    let ta = tokenize_seq(a);
    let tb = tokenize_seq(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(&ta, &tb);
    if lcs == 0 {
        return 0.0;
    }
    let recall = lcs as f64 / ta.len() as f64;
    let precision = lcs as f64 / tb.len() as f64;
    2.0 * precision * recall / (precision + recall)
}
