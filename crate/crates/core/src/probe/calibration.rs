//! Threshold calibration over labeled response pairs (`probe-report/1`).

use serde::{Deserialize, Serialize};

use super::metrics::{jaccard, ncd, rouge_l, GZIP_LEVEL};
use crate::error::ProbeError;
use crate::retrieval::tokenize;

pub const CALIBRATION_SCHEMA: &str = "probe-report/1";

const HISTOGRAM_BINS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CalibrationPair {
    pub id: String,
    pub response_a: String,
    pub response_b: String,
    /// Whether the pair was judged substantively different.
    pub substantive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCorpus {
    pub pairs: Vec<CalibrationPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PairMetrics {
    pub id: String,
    pub substantive: bool,
    pub ncd: f64,
    pub rouge_l: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    /// Exclusive upper edge; absent for the open-ended last bin.
    pub hi: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricSummary {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n - 1); zero for a single pair.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_substantive: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_non_substantive: Option<f64>,
    /// |mean_substantive - mean_non_substantive| when both groups exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    /// Fixed-width bins of 0.1 starting at 0; the last bin is open-ended.
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorInfo {
    pub format: String,
    pub level: u32,
    pub mtime: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CalibrationReport {
    pub schema: String,
    pub compressor: CompressorInfo,
    pub pair_count: usize,
    pub substantive_count: usize,
    pub tau: f64,
    /// Share of pairs whose NCD is strictly above tau.
    pub fraction_above_tau: f64,
    pub pairs: Vec<PairMetrics>,
    pub ncd: MetricSummary,
    pub rouge_l: MetricSummary,
    pub jaccard: MetricSummary,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs).expect("non-empty");
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

fn histogram(xs: &[f64]) -> Vec<HistogramBin> {
    let mut bins: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|i| HistogramBin {
            lo: i as f64 / 10.0,
            hi: (i + 1 < HISTOGRAM_BINS).then(|| (i + 1) as f64 / 10.0),
            count: 0,
        })
        .collect();
    for &x in xs {
        let idx = ((x * 10.0).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        bins[idx].count += 1;
    }
    bins
}

fn summarize(values: &[(f64, bool)]) -> MetricSummary {
    let all: Vec<f64> = values.iter().map(|(v, _)| *v).collect();
    let sub: Vec<f64> = values.iter().filter(|(_, s)| *s).map(|(v, _)| *v).collect();
    let non: Vec<f64> = values.iter().filter(|(_, s)| !*s).map(|(v, _)| *v).collect();
    let ms = mean(&sub);
    let mn = mean(&non);
    MetricSummary {
        mean: mean(&all).unwrap_or(0.0),
        median: median(&all),
        sd: sample_sd(&all),
        min: all.iter().copied().fold(f64::INFINITY, f64::min),
        max: all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_substantive: ms,
        mean_non_substantive: mn,
        separation: ms.zip(mn).map(|(a, b)| (a - b).abs()),
        histogram: histogram(&all),
    }
}

/// Computes NCD, ROUGE-L and token Jaccard for every pair and summarizes
/// each metric overall and by label.
pub fn run_calibration(corpus: &CalibrationCorpus, tau: f64) -> Result<CalibrationReport, ProbeError> {
    if corpus.pairs.is_empty() {
        return Err(ProbeError::Argument("calibration corpus is empty".into()));
    }
    let mut pairs = Vec::with_capacity(corpus.pairs.len());
    for p in &corpus.pairs {
        let d = ncd(p.response_a.as_bytes(), p.response_b.as_bytes())
            .map_err(|e| ProbeError::Argument(format!("pair {}: {e}", p.id)))?;
        pairs.push(PairMetrics {
            id: p.id.clone(),
            substantive: p.substantive,
            ncd: d,
            rouge_l: rouge_l(&p.response_a, &p.response_b),
            jaccard: jaccard(&tokenize(&p.response_a), &tokenize(&p.response_b)),
        });
    }
    let pick = |f: fn(&PairMetrics) -> f64| pairs.iter().map(|p| (f(p), p.substantive)).collect::<Vec<_>>();
    let ncd_vals = pick(|p| p.ncd);
    let above = ncd_vals.iter().filter(|(v, _)| *v > tau).count();
    Ok(CalibrationReport {
        schema: CALIBRATION_SCHEMA.to_string(),
        compressor: CompressorInfo {
            format: "gzip".into(),
            level: GZIP_LEVEL,
            mtime: 0,
        },
        pair_count: pairs.len(),
        substantive_count: pairs.iter().filter(|p| p.substantive).count(),
        tau,
        fraction_above_tau: above as f64 / pairs.len() as f64,
        ncd: summarize(&ncd_vals),
        rouge_l: summarize(&pick(|p| p.rouge_l)),
        jaccard: summarize(&pick(|p| p.jaccard)),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, a: &str, b: &str, substantive: bool) -> CalibrationPair {
        CalibrationPair {
            id: id.into(),
            response_a: a.into(),
            response_b: b.into(),
            substantive,
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(run_calibration(&CalibrationCorpus { pairs: vec![] }, 0.7).is_err());
    }

    #[test]
    fn identical_pairs_have_zero_separation() {
        let text = "Stay at the capsule hotel and keep the rest for activities.";
        let corpus = CalibrationCorpus {
            pairs: vec![pair("1", text, text, true), pair("2", text, text, false), pair("3", text, text, true)],
        };
        let r = run_calibration(&corpus, 0.7).unwrap();
        assert_eq!(r.ncd.mean_substantive, r.ncd.mean_non_substantive);
        assert_eq!(r.ncd.separation, Some(0.0));
        assert_eq!(r.ncd.sd, 0.0);
        assert_eq!(r.rouge_l.mean, 1.0);
        assert_eq!(r.jaccard.mean, 1.0);
        assert_eq!(r.schema, CALIBRATION_SCHEMA);
    }

    #[test]
    fn summary_statistics() {
        let vals = [(0.1, true), (0.4, false), (0.3, true), (0.9, true)];
        let s = summarize(&vals);
        assert!((s.mean - 0.425).abs() < 1e-12);
        assert!((s.median - 0.35).abs() < 1e-12);
        // sample variance: sum of squared deviations / 3
        let dev: f64 = [0.1f64, 0.4, 0.3, 0.9].iter().map(|x| (x - 0.425).powi(2)).sum();
        assert!((s.sd - (dev / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.mean_substantive.unwrap() - 1.3 / 3.0).abs() < 1e-12);
        assert_eq!(s.mean_non_substantive, Some(0.4));
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(s.histogram[9].count, 1);
    }

    #[test]
    fn single_label_has_no_separation() {
        let r = run_calibration(&CalibrationCorpus { pairs: vec![pair("1", "a b", "c d", true)] }, 0.7).unwrap();
        assert_eq!(r.ncd.separation, None);
        assert_eq!(r.ncd.mean_non_substantive, None);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = run_calibration(
            &CalibrationCorpus { pairs: vec![pair("1", "alpha beta", "alpha gamma", true), pair("2", "x", "y", false)] },
            0.7,
        )
        .unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: CalibrationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.pairs.len(), r.pairs.len());
        assert!((back.ncd.mean - r.ncd.mean).abs() < 1e-15);
        assert_eq!(back.ncd.histogram, r.ncd.histogram);
    }
}
