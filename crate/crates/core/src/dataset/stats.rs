use serde::{Deserialize, Serialize};

use super::{normalize_spans, quantile_sorted, Sample};
use crate::error::{Error, Result};

/// Fixed-width histogram. Values past the last edge land in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, bin_width: f64, bins: usize) -> Self {
        Self {
            lo,
            bin_width,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, x: f64) {
        let last = self.counts.len() - 1;
        let b = ((x - self.lo) / self.bin_width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(last) };
        self.counts[b] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `(lower edge, upper edge)` of bin `i`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let a = self.lo + i as f64 * self.bin_width;
        (a, a + self.bin_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let count = sorted.len();
        let mean = if count == 0 {
            f64::NAN
        } else {
            sorted.iter().sum::<f64>() / count as f64
        };
        Self {
            count,
            mean,
            median: quantile_sorted(&sorted, 0.5),
            min: sorted.first().copied().unwrap_or(f64::NAN),
            max: sorted.last().copied().unwrap_or(f64::NAN),
        }
    }
}

/// Corpus distributions. Video length and text length are counted once per
/// record, compression ratio once per reference, span centres once per span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    /// Seconds.
    pub video_length: Summary,
    pub video_length_histogram: Histogram,
    pub ratio: Summary,
    pub ratio_histogram: Histogram,
    /// Words.
    pub text_length: Summary,
    pub text_length_histogram: Histogram,
    /// Span centre divided by video length, in `[0, 1]`.
    pub span_center: Summary,
    pub span_center_histogram: Histogram,
}

pub fn compute_stats(samples: &[Sample]) -> Result<CorpusStats> {
    if samples.is_empty() {
        return Err(Error::invalid("statistics of an empty corpus"));
    }
    let mut lengths = Vec::with_capacity(samples.len());
    let mut ratios = Vec::with_capacity(samples.len() * 10);
    let mut words = Vec::with_capacity(samples.len());
    let mut centers = Vec::new();
    let mut length_hist = Histogram::new(0.0, 30.0, 26);
    let mut ratio_hist = Histogram::new(0.0, 0.01, 25);
    let mut text_hist = Histogram::new(0.0, 10.0, 20);
    let mut center_hist = Histogram::new(0.0, 0.05, 20);

    for s in samples {
        let t = s.video.frame_count as f64;
        lengths.push(s.video.duration_sec);
        length_hist.add(s.video.duration_sec);
        let w = s.refs.words().len() as f64;
        words.push(w);
        text_hist.add(w);
        for r in s.ratios() {
            ratios.push(r);
            ratio_hist.add(r);
        }
        for annotation in &s.refs.video_refs {
            for span in normalize_spans(&annotation.spans).0 {
                let c = (span.start + span.end) as f64 / 2.0 / t;
                centers.push(c);
                center_hist.add(c);
            }
        }
    }

    Ok(CorpusStats {
        records: samples.len(),
        video_length: Summary::of(&lengths),
        video_length_histogram: length_hist,
        ratio: Summary::of(&ratios),
        ratio_histogram: ratio_hist,
        text_length: Summary::of(&words),
        text_length_histogram: text_hist,
        span_center: Summary::of(&centers),
        span_center_histogram: center_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::sample;

    #[test]
    fn summary_cases() {
        let s = Summary::of(&[10.0, 20.0, 30.0]);
        assert_eq!((s.mean, s.median), (20.0, 20.0));
        let s = Summary::of(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(s.median, 2.5);
    }

    #[test]
    fn corpus_stats() {
        let mut samples = vec![
            sample("a", 10, &[1; 10]),
            sample("b", 20, &[2; 10]),
            sample("c", 30, &[3; 10]),
        ];
        let texts = ["w ".repeat(49), "w ".repeat(50), "w ".repeat(51)];
        for (s, t) in samples.iter_mut().zip(texts) {
            s.refs.text_summary = t;
        }
        let stats = compute_stats(&samples).unwrap();
        assert_eq!(stats.video_length.mean, 20.0);
        assert_eq!(stats.video_length.median, 20.0);
        assert!((stats.text_length.mean - 50.0).abs() < 1e-12);
        assert!((stats.ratio.mean - 0.1).abs() < 1e-12);
        assert_eq!(stats.video_length_histogram.total(), 3);
        assert_eq!(stats.text_length_histogram.total(), 3);
        assert_eq!(stats.ratio_histogram.total(), 30);
        assert_eq!(stats.span_center_histogram.total(), 30);
        assert!(compute_stats(&[]).is_err());
    }
}
