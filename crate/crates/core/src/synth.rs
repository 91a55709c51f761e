//! Synthetic corpus with planted key spans and matching captions.
//!
//! Every video has a place, shown on every frame, and a subject, action
//! and object that appear together only inside one contiguous key span.
//! The caption names all four, so a text decoder must read the key span to
//! get it right, and the same span is what the annotators mark. Annotators
//! copy the key span with a random shift of up to `jitter` frames.

use ndarray::{Array1, Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameData, ReferenceSet, Sample, Span, SpanAnnotation, Split, VideoRecord};
use crate::metrics::ClipPair;
use crate::vsum::budget;

pub const SUBJECTS: [&str; 6] = ["dog", "chef", "child", "robot", "farmer", "dancer"];
pub const ACTIONS: [&str; 6] = ["carries", "paints", "throws", "cleans", "opens", "kicks"];
pub const OBJECTS: [&str; 6] = ["box", "ball", "door", "chair", "bottle", "kite"];
pub const PLACES: [&str; 4] = ["park", "kitchen", "street", "garden"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub videos: usize,
    pub d_vis: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub annotators: usize,
    /// Key-span length as a fraction of the video.
    pub key_ratio: f64,
    /// Largest annotator shift, in frames.
    pub jitter: usize,
    /// Standard deviation of per-frame Gaussian noise.
    pub noise: f64,
    /// Amplitude of the single distractor concept on background frames.
    pub distractor: f64,
    /// Emit raw `side × side × 3` frames instead of features.
    pub raw_side: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 200,
            d_vis: 32,
            min_frames: 20,
            max_frames: 60,
            annotators: 10,
            key_ratio: 0.15,
            jitter: 1,
            noise: 0.1,
            distractor: 0.5,
            raw_side: None,
            seed: 0,
        }
    }
}

/// Generated samples with the key span of each video.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub samples: Vec<Sample>,
    pub planted: Vec<Span>,
}

impl SynthCorpus {
    /// Planted key-span labels of video `i`.
    pub fn planted_labels(&self, i: usize) -> Vec<bool> {
        let t = self.samples[i].video.frame_count;
        let s = self.planted[i];
        (0..t).map(|f| s.start <= f && f < s.end).collect()
    }
}

fn unit_vectors(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    (0..n)
        .map(|_| {
            let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.dot(&v).sqrt();
            v / norm
        })
        .collect()
}

pub fn caption(subject: &str, action: &str, object: &str, place: &str) -> String {
    format!("the {subject} {action} the {object} in the {place}")
}

/// Turns a feature row into a raw frame through a fixed random projection.
fn render(features: &Array2<f64>, side: usize, projection: &Array2<f64>) -> Vec<Array3<f32>> {
    features
        .rows()
        .into_iter()
        .map(|row| {
            let pixels = projection.dot(&row);
            Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
                let v = pixels[(y * side + x) * 3 + c];
                (1.0 / (1.0 + (-v).exp())) as f32
            })
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    assert!(cfg.min_frames >= 1 && cfg.min_frames <= cfg.max_frames, "bad frame range");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Concept vectors come from a fixed stream so corpora with different
    // seeds share one visual vocabulary.
    let mut concept_rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let d = cfg.d_vis;
    let subjects = unit_vectors(SUBJECTS.len(), d, &mut concept_rng);
    let actions = unit_vectors(ACTIONS.len(), d, &mut concept_rng);
    let objects = unit_vectors(OBJECTS.len(), d, &mut concept_rng);
    let places = unit_vectors(PLACES.len(), d, &mut concept_rng);
    let projection = cfg.raw_side.map(|side| {
        Array2::from_shape_fn((side * side * 3, d), |_| {
            let x: f64 = StandardNormal.sample(&mut concept_rng);
            x
        })
    });
    let all: Vec<&Array1<f64>> = subjects.iter().chain(&actions).chain(&objects).collect();

    let mut samples = Vec::with_capacity(cfg.videos);
    let mut planted = Vec::with_capacity(cfg.videos);
    for v in 0..cfg.videos {
        let t = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let (si, ai, oi, pi) = (
            rng.random_range(0..SUBJECTS.len()),
            rng.random_range(0..ACTIONS.len()),
            rng.random_range(0..OBJECTS.len()),
            rng.random_range(0..PLACES.len()),
        );
        let len = budget(t, cfg.key_ratio);
        let start = rng.random_range(0..=t - len);
        let key = Span::new(start, start + len);
        let mut feats = Array2::<f64>::zeros((t, d));
        for (f, mut row) in feats.rows_mut().into_iter().enumerate() {
            row += &(&places[pi] * 0.5);
            if key.start <= f && f < key.end {
                row += &subjects[si];
                row += &actions[ai];
                row += &objects[oi];
            } else {
                let distractor = *all.choose(&mut rng).expect("non-empty");
                row.scaled_add(cfg.distractor, distractor);
            }
            for x in row.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += cfg.noise * n;
            }
        }
        let refs = (0..cfg.annotators)
            .map(|a| {
                let shift = rng.random_range(0..=2 * cfg.jitter) as isize - cfg.jitter as isize;
                let s = (key.start as isize + shift).clamp(0, (t - len) as isize) as usize;
                SpanAnnotation::new(a as u8, vec![Span::new(s, s + len)])
            })
            .collect();
        let video_id = format!("synth{v:04}");
        let frames = match (&projection, cfg.raw_side) {
            (Some(p), Some(side)) => FrameData::Raw(render(&feats, side, p)),
            _ => FrameData::Features(feats),
        };
        samples.push(Sample {
            video: VideoRecord {
                video_id: video_id.clone(),
                duration_sec: t as f64,
                frame_count: t,
                frames,
                split: Split::Train,
            },
            refs: ReferenceSet {
                video_id,
                video_refs: refs,
                text_summary: caption(SUBJECTS[si], ACTIONS[ai], OBJECTS[oi], PLACES[pi]),
            },
        });
        planted.push(key);
    }
    SynthCorpus { samples, planted }
}

/// Key-span frames paired with their caption, one pair per video. Needs
/// feature frames.
pub fn clip_pairs(corpus: &SynthCorpus) -> Vec<ClipPair> {
    corpus
        .samples
        .iter()
        .zip(&corpus.planted)
        .map(|(s, key)| {
            let FrameData::Features(f) = &s.video.frames else {
                panic!("clip pairs need feature frames");
            };
            ClipPair {
                frames: f.slice(ndarray::s![key.start..key.end, ..]).to_owned(),
                text: s.refs.text_summary.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = SynthConfig {
            videos: 12,
            ..Default::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.samples, b.samples);
        for (i, s) in a.samples.iter().enumerate() {
            assert_eq!(s.video.frames.len(), Some(s.video.frame_count));
            assert_eq!(s.refs.video_refs.len(), 10);
            let key = a.planted[i];
            assert_eq!(key.len(), budget(s.video.frame_count, 0.15));
            for r in &s.refs.video_refs {
                let sp = r.spans[0];
                assert_eq!(sp.len(), key.len());
                assert!(sp.start.abs_diff(key.start) <= cfg.jitter);
                assert!(sp.end <= s.video.frame_count);
            }
            assert_eq!(s.refs.words().len(), 8);
        }
    }

    #[test]
    fn raw_frames_in_unit_range() {
        let c = generate(&SynthConfig {
            videos: 2,
            raw_side: Some(8),
            ..Default::default()
        });
        let FrameData::Raw(frames) = &c.samples[0].video.frames else {
            panic!("expected raw frames")
        };
        assert_eq!(frames[0].dim(), (8, 8, 3));
        assert!(frames.iter().flat_map(|f| f.iter()).all(|&x| (0.0..=1.0).contains(&x)));
    }
}
