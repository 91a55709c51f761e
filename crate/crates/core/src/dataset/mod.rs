//! Annotated long-video records: validation, span arithmetic, filtering,
//! length-stratified splitting, corpus statistics and batch padding.
//!
//! Frames are sampled at 1 fps, so frame indices and seconds coincide. Spans
//! are half-open `[start, end)` frame intervals.

mod io;
mod stats;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_corpus, parse_corpus, write_corpus, FeatureManifest, FeatureStore, LoadOptions,
    LoadReport, FEATURE_DTYPE, FEATURE_STORE_VERSION,
};
pub use stats::{compute_stats, CorpusStats, Histogram, Summary};

/// Number of annotators per video.
pub const ANNOTATORS: usize = 10;
/// Shortest video kept in the corpus, in frames.
pub const MIN_FRAMES: usize = 10;
/// Longest video in the corpus, in frames.
pub const MAX_CORPUS_FRAMES: usize = 755;
/// Curation threshold on the per-annotator compression ratio.
pub const RATIO_THRESHOLD: f64 = 0.20;
/// Default truncation length for video sequences.
pub const MAX_VIDEO_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-frame content of a video.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum FrameData {
    /// Annotation-only record; frames were not requested.
    #[default]
    NotLoaded,
    /// Cached frame-encoder output, one row per frame.
    Features(Array2<f64>),
    /// Decoded frames, each `height × width × 3` with values in `[0, 1]`.
    Raw(Vec<Array3<f32>>),
}

impl FrameData {
    pub fn len(&self) -> Option<usize> {
        match self {
            FrameData::NotLoaded => None,
            FrameData::Features(f) => Some(f.nrows()),
            FrameData::Raw(r) => Some(r.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }
}

/// One long video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration_sec: f64,
    pub frame_count: usize,
    pub frames: FrameData,
    pub split: Split,
}

/// Half-open frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// One annotator's video summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanAnnotation {
    pub annotator_id: u8,
    pub spans: Vec<Span>,
}

impl SpanAnnotation {
    pub fn new(annotator_id: u8, spans: Vec<Span>) -> Self {
        Self {
            annotator_id,
            spans,
        }
    }

    /// Frames covered by the union of the spans.
    pub fn covered_frames(&self) -> usize {
        normalize_spans(&self.spans).0.iter().map(Span::len).sum()
    }

    pub fn labels(&self, frame_count: usize) -> Result<Vec<bool>> {
        spans_to_labels(&self.spans, frame_count)
    }
}

/// The ten video-summary references and the narrative text summary of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub video_id: String,
    pub video_refs: Vec<SpanAnnotation>,
    pub text_summary: String,
}

impl ReferenceSet {
    pub fn words(&self) -> Vec<String> {
        crate::text::normalize_words(&self.text_summary)
    }

    /// Binary label vectors of every reference.
    pub fn label_matrix(&self, frame_count: usize) -> Result<Vec<Vec<bool>>> {
        self.video_refs
            .iter()
            .map(|r| r.labels(frame_count))
            .collect()
    }
}

/// A video together with its references.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video: VideoRecord,
    pub refs: ReferenceSet,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.video.video_id
    }

    /// Compression ratio of every reference.
    pub fn ratios(&self) -> Vec<f64> {
        let t = self.video.frame_count;
        self.refs
            .video_refs
            .iter()
            .map(|r| compression_ratio(r.covered_frames().min(t), t).unwrap_or(0.0))
            .collect()
    }
}

/// Sorts spans and merges any that overlap or touch. The flag reports whether
/// a genuine overlap (not mere adjacency) was found.
pub fn normalize_spans(spans: &[Span]) -> (Vec<Span>, bool) {
    let mut sorted: Vec<Span> = spans.iter().copied().filter(|s| !s.is_empty()).collect();
    sorted.sort();
    let mut out: Vec<Span> = Vec::with_capacity(sorted.len());
    let mut overlapped = false;
    for s in sorted {
        match out.last_mut() {
            Some(last) if s.start <= last.end => {
                if s.start < last.end {
                    overlapped = true;
                }
                last.end = last.end.max(s.end);
            }
            _ => out.push(s),
        }
    }
    (out, overlapped)
}

/// Frame-level key-frame labels: `labels[i]` is true iff `i` lies in a span.
pub fn spans_to_labels(spans: &[Span], frame_count: usize) -> Result<Vec<bool>> {
    let mut labels = vec![false; frame_count];
    for s in spans {
        if s.start >= s.end || s.end > frame_count {
            return Err(Error::invalid(format!(
                "span [{}, {}) is not valid for {frame_count} frames",
                s.start, s.end
            )));
        }
        labels[s.start..s.end].iter_mut().for_each(|l| *l = true);
    }
    Ok(labels)
}

/// Maximal runs of true labels.
pub fn labels_to_spans(labels: &[bool]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(Span::new(s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(Span::new(s, labels.len()));
    }
    spans
}

/// `summary_frames / video_frames`.
pub fn compression_ratio(summary_frames: usize, video_frames: usize) -> Result<f64> {
    if video_frames == 0 {
        return Err(Error::invalid("compression ratio of a zero-length video"));
    }
    if summary_frames > video_frames {
        return Err(Error::invalid(format!(
            "summary of {summary_frames} frames exceeds video of {video_frames}"
        )));
    }
    Ok(summary_frames as f64 / video_frames as f64)
}

/// Keeps samples whose largest per-annotator compression ratio is at most
/// `threshold`.
pub fn filter_by_ratio(samples: Vec<Sample>, threshold: f64) -> Vec<Sample> {
    samples
        .into_iter()
        .filter(|s| s.ratios().into_iter().fold(0.0, f64::max) <= threshold)
        .collect()
}

/// Requested sizes of the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitSets {
    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Partitions samples into train/val/test with exactly the requested sizes
/// while keeping the video-length distribution of every split close to the
/// corpus distribution.
///
/// Samples are ordered by length, shuffled within each length decile, and then
/// dealt out: each position goes to the split that is furthest behind its
/// proportional quota.
pub fn split_corpus(samples: Vec<Sample>, sizes: SplitSizes, seed: u64) -> Result<SplitSets> {
    let n = samples.len();
    if sizes.total() != n {
        return Err(Error::invalid(format!(
            "split sizes sum to {} but corpus has {n} records",
            sizes.total()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        samples[a]
            .video
            .frame_count
            .cmp(&samples[b].video.frame_count)
            .then_with(|| samples[a].video.video_id.cmp(&samples[b].video.video_id))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in 0..10 {
        let lo = d * n / 10;
        let hi = (d + 1) * n / 10;
        order[lo..hi].shuffle(&mut rng);
    }

    let mut assigned = [0usize; 3];
    let mut labels = vec![Split::Train; n];
    for (pos, &idx) in order.iter().enumerate() {
        let mut best = None;
        let mut best_deficit = f64::NEG_INFINITY;
        for (k, split) in Split::ALL.iter().enumerate() {
            let quota = sizes.get(*split);
            if assigned[k] >= quota {
                continue;
            }
            let deficit = quota as f64 * (pos + 1) as f64 / n as f64 - assigned[k] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = Some(k);
            }
        }
        let k = best.expect("quotas sum to n");
        assigned[k] += 1;
        labels[idx] = Split::ALL[k];
    }

    let mut sets = SplitSets::default();
    for (mut sample, split) in samples.into_iter().zip(labels) {
        sample.video.split = split;
        sets.get_mut(split).push(sample);
    }
    Ok(sets)
}

/// The nine interior deciles of the frame counts.
pub fn length_deciles(samples: &[Sample]) -> Vec<f64> {
    let mut lengths: Vec<f64> = samples.iter().map(|s| s.video.frame_count as f64).collect();
    lengths.sort_by(f64::total_cmp);
    (1..10).map(|d| quantile_sorted(&lengths, d as f64 / 10.0)).collect()
}

/// Linear-interpolation quantile of an ascending slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-frame training target: a frame is a key frame when at least half of
/// the annotators selected it.
pub fn majority_labels(labels: &[Vec<bool>]) -> Vec<bool> {
    let Some(first) = labels.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| 2 * labels.iter().filter(|l| l[i]).count() >= labels.len())
        .collect()
}

/// A padded batch of frame-feature sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// `batch × width × d` feature block.
    pub features: Array3<f64>,
    /// `batch × width`; true at real (unpadded) frames.
    pub mask: Array2<bool>,
}

impl PaddedBatch {
    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn valid_len(&self, b: usize) -> usize {
        self.mask.row(b).iter().filter(|m| **m).count()
    }
}

/// Truncates sequences to `max_len`, pads to the longest remaining length
/// with `pad`, and builds the validity mask.
pub fn pad_batch(
    batch: &[ArrayView2<f64>],
    max_len: usize,
    pad: ArrayView1<f64>,
) -> Result<PaddedBatch> {
    let dim = pad.len();
    if batch.is_empty() {
        return Err(Error::invalid("cannot pad an empty batch"));
    }
    for f in batch {
        if f.ncols() != dim {
            return Err(Error::shape(format!(
                "feature width {} differs from pad vector width {dim}",
                f.ncols()
            )));
        }
    }
    let width = batch.iter().map(|f| f.nrows().min(max_len)).max().unwrap_or(0);
    let mut features = Array3::zeros((batch.len(), width, dim));
    let mut mask = Array2::from_elem((batch.len(), width), false);
    for (b, f) in batch.iter().enumerate() {
        let len = f.nrows().min(max_len);
        for t in 0..width {
            let mut dst = features.slice_mut(ndarray::s![b, t, ..]);
            if t < len {
                dst.assign(&f.row(t));
                mask[[b, t]] = true;
            } else {
                dst.assign(&pad);
            }
        }
    }
    Ok(PaddedBatch { features, mask })
}

/// Groups samples by split, preserving order.
pub fn by_split(samples: &[Sample]) -> BTreeMap<Split, Vec<&Sample>> {
    let mut map: BTreeMap<Split, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.video.split).or_default().push(s);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn lbl(v: &[u8]) -> Vec<bool> {
        v.iter().map(|x| *x == 1).collect()
    }

    pub(crate) fn sample(id: &str, frames: usize, covered: &[usize]) -> Sample {
        let refs = covered
            .iter()
            .enumerate()
            .map(|(a, &c)| SpanAnnotation::new(a as u8, vec![Span::new(0, c)]))
            .collect();
        Sample {
            video: VideoRecord {
                video_id: id.to_string(),
                duration_sec: frames as f64,
                frame_count: frames,
                frames: FrameData::NotLoaded,
                split: Split::Train,
            },
            refs: ReferenceSet {
                video_id: id.to_string(),
                video_refs: refs,
                text_summary: "a video of something".into(),
            },
        }
    }

    #[test]
    fn labels_from_spans() {
        assert_eq!(spans_to_labels(&[Span::new(2, 5)], 6).unwrap(), lbl(&[0, 0, 1, 1, 1, 0]));
        assert_eq!(spans_to_labels(&[], 4).unwrap(), lbl(&[0, 0, 0, 0]));
        // Covered indices enumerated by hand: {0, 1} ∪ {3}.
        assert_eq!(
            spans_to_labels(&[Span::new(0, 2), Span::new(3, 4)], 4).unwrap(),
            lbl(&[1, 1, 0, 1])
        );
        assert!(spans_to_labels(&[Span::new(2, 7)], 6).is_err());
    }

    #[test]
    fn overlapping_spans_merge() {
        let (merged, overlap) = normalize_spans(&[Span::new(3, 7), Span::new(1, 5)]);
        assert_eq!(merged, vec![Span::new(1, 7)]);
        assert!(overlap);
        let (merged, overlap) = normalize_spans(&[Span::new(3, 5), Span::new(1, 3)]);
        assert_eq!(merged, vec![Span::new(1, 5)]);
        assert!(!overlap);
    }

    #[test]
    fn ratio_cases() {
        assert!((compression_ratio(18, 120).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(compression_ratio(0, 100).unwrap(), 0.0);
        assert!(compression_ratio(0, 0).is_err());
    }

    #[test]
    fn ratio_filter_uses_worst_annotator() {
        let keep = sample("a", 100, &[12, 13, 14, 15, 12, 13, 14, 15, 12, 13]);
        let mut high = [12usize; 10];
        high[4] = 25;
        let drop = sample("b", 100, &high);
        let out = filter_by_ratio(vec![keep, drop], RATIO_THRESHOLD);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id(), "a");
    }

    #[test]
    fn ratio_filter_counts() {
        // Three of ten records have an annotator above the threshold.
        let samples: Vec<Sample> = (0..10)
            .map(|i| {
                let worst = if i % 3 == 0 && i > 0 { 30 } else { 18 };
                let mut cov = [10usize; 10];
                cov[9] = worst;
                sample(&format!("v{i}"), 100, &cov)
            })
            .collect();
        let expected = samples
            .iter()
            .filter(|s| s.ratios().iter().all(|r| *r <= 0.20))
            .count();
        assert_eq!(expected, 7);
        assert_eq!(filter_by_ratio(samples, 0.20).len(), 7);
    }

    #[test]
    fn split_sizes_and_modes() {
        let samples: Vec<Sample> = (0..100)
            .map(|i| sample(&format!("v{i:03}"), if i % 2 == 0 { 10 } else { 300 }, &[1; 10]))
            .collect();
        let sets = split_corpus(samples, SplitSizes::new(60, 20, 20), 7).unwrap();
        assert_eq!((sets.train.len(), sets.val.len(), sets.test.len()), (60, 20, 20));
        for split in Split::ALL {
            let part = sets.get(split);
            let short = part.iter().filter(|s| s.video.frame_count == 10).count();
            let frac = short as f64 / part.len() as f64;
            assert!((frac - 0.5).abs() <= 0.05, "{split:?}: {frac}");
            assert!(part.iter().all(|s| s.video.split == split));
        }
        let bad = split_corpus(vec![sample("x", 20, &[1; 10])], SplitSizes::new(1, 1, 0), 0);
        assert!(bad.is_err());
    }

    #[test]
    fn uniform_lengths_have_identical_deciles() {
        let samples: Vec<Sample> = (0..50).map(|i| sample(&format!("{i}"), 42, &[1; 10])).collect();
        let corpus = length_deciles(&samples);
        let sets = split_corpus(samples, SplitSizes::new(30, 10, 10), 1).unwrap();
        for split in Split::ALL {
            assert_eq!(length_deciles(sets.get(split)), corpus);
        }
    }

    #[test]
    fn padding() {
        let a = Array2::from_elem((3, 2), 1.0);
        let b = Array2::from_elem((5, 2), 2.0);
        let pad = Array1::from(vec![-1.0, -1.0]);
        let batch = pad_batch(&[a.view(), b.view()], 512, pad.view()).unwrap();
        assert_eq!(batch.width(), 5);
        assert_eq!(batch.mask.row(0).to_vec(), vec![true, true, true, false, false]);
        assert_eq!(batch.mask.row(1).to_vec(), vec![true; 5]);
        assert_eq!(batch.features[[0, 4, 1]], -1.0);

        let long = Array2::zeros((600, 2));
        let batch = pad_batch(&[long.view()], 512, pad.view()).unwrap();
        assert_eq!(batch.width(), 512);
        assert_eq!(batch.valid_len(0), 512);

        let single = array![[0.5, 0.25]];
        let batch = pad_batch(&[single.view()], 512, pad.view()).unwrap();
        assert!(batch.mask.iter().all(|m| *m));
    }

    #[test]
    fn majority_vote() {
        let refs = vec![lbl(&[1, 1, 0]), lbl(&[1, 0, 0]), lbl(&[0, 1, 0]), lbl(&[1, 0, 1])];
        assert_eq!(majority_labels(&refs), lbl(&[1, 1, 0]));
    }

    fn arb_spans() -> impl Strategy<Value = (Vec<Span>, usize)> {
        (1usize..60).prop_flat_map(|t| {
            let span = (0..t).prop_flat_map(move |s| (Just(s), s + 1..=t));
            (
                proptest::collection::vec(span.prop_map(|(s, e)| Span::new(s, e)), 0..6),
                Just(t),
            )
        })
    }

    proptest! {
        #[test]
        fn labels_round_trip((spans, t) in arb_spans()) {
            let labels = spans_to_labels(&spans, t).unwrap();
            let (normalized, _) = normalize_spans(&spans);
            prop_assert_eq!(labels_to_spans(&labels), normalized.clone());
            let covered: usize = normalized.iter().map(Span::len).sum();
            prop_assert_eq!(labels.iter().filter(|l| **l).count(), covered);
        }

        #[test]
        fn filter_is_idempotent(cov in proptest::collection::vec(proptest::collection::vec(0usize..40, 10), 1..12)) {
            let samples: Vec<Sample> = cov.iter().enumerate()
                .map(|(i, c)| sample(&format!("v{i}"), 100, c)).collect();
            let once = filter_by_ratio(samples, 0.2);
            let twice = filter_by_ratio(once.clone(), 0.2);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn split_partitions(lengths in proptest::collection::vec(10usize..300, 3..60), seed in 0u64..1000) {
            let n = lengths.len();
            let samples: Vec<Sample> = lengths.iter().enumerate()
                .map(|(i, &l)| sample(&format!("v{i}"), l, &[1; 10])).collect();
            let train = n / 2;
            let val = (n - train) / 2;
            let sets = split_corpus(samples, SplitSizes::new(train, val, n - train - val), seed).unwrap();
            let mut ids: Vec<String> = Split::ALL.iter()
                .flat_map(|s| sets.get(*s).iter().map(|x| x.id().to_string()))
                .collect();
            ids.sort();
            let mut expect: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
            expect.sort();
            prop_assert_eq!(ids, expect);
        }

        #[test]
        fn padding_preserves_prefix(lens in proptest::collection::vec(1usize..20, 1..5), max_len in 1usize..25) {
            let mats: Vec<Array2<f64>> = lens.iter().enumerate()
                .map(|(b, &l)| Array2::from_shape_fn((l, 3), |(t, c)| (b * 100 + t * 3 + c) as f64))
                .collect();
            let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
            let pad = Array1::zeros(3);
            let batch = pad_batch(&views, max_len, pad.view()).unwrap();
            for (b, m) in mats.iter().enumerate() {
                let keep = m.nrows().min(max_len);
                prop_assert_eq!(batch.valid_len(b), keep);
                for t in 0..keep {
                    for c in 0..3 {
                        prop_assert_eq!(batch.features[[b, t, c]], m[[t, c]]);
                    }
                }
            }
        }
    }
}
