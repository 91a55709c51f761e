//! JSON-lines annotation files and the on-disk frame-feature cache.
//!
//! Annotation record, one JSON object per line:
//!
//! ```text
//! {"video_id": "v_x", "duration_sec": 124.0, "split": "train",
//!  "tsum": "a man is ...", "vsum_onehot": [[[12, 20], [40, 44]], ... ten entries]}
//! ```
//!
//! Each of the ten `vsum_onehot` entries is either a list of `[start, end)`
//! frame pairs or a 0/1 vector with one entry per frame. `duration` is
//! accepted for `duration_sec`, and `tsum` may be a list of sentences that are
//! joined into one paragraph.
//!
//! Feature store layout: `manifest.json` plus one `<video_id>.bin` per video
//! holding `frame_count × d_vis` little-endian `f64` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    normalize_spans, FrameData, ReferenceSet, Sample, Span, SpanAnnotation, Split, VideoRecord,
    ANNOTATORS, MAX_CORPUS_FRAMES, MIN_FRAMES, RATIO_THRESHOLD,
};
use crate::error::{Error, Result};

pub const FEATURE_STORE_VERSION: u32 = 1;
pub const FEATURE_DTYPE: &str = "f64-le";

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Reject overlapping spans instead of merging them with a warning.
    pub strict_overlap: bool,
    pub min_frames: usize,
    pub max_frames: Option<usize>,
    /// Upper bound on each reference's covered fraction (`ceil(bound · T)` frames).
    pub max_coverage: Option<f64>,
    pub annotators: usize,
    /// Split for records that do not name one. `None` makes the field required.
    pub default_split: Option<Split>,
    /// Feature store to attach frames from.
    pub features: Option<PathBuf>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            strict_overlap: false,
            min_frames: MIN_FRAMES,
            max_frames: Some(MAX_CORPUS_FRAMES),
            max_coverage: Some(RATIO_THRESHOLD),
            annotators: ANNOTATORS,
            default_split: None,
            features: None,
        }
    }
}

/// Outcome of loading an annotation file. Invalid records are listed in
/// `errors` and excluded from `samples`.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub errors: Vec<Error>,
    pub warnings: Vec<String>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TextField {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RefField {
    Spans(Vec<[i64; 2]>),
    OneHot(Vec<u8>),
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    video_id: String,
    #[serde(alias = "duration")]
    duration_sec: f64,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    frame_count: Option<usize>,
    tsum: TextField,
    vsum_onehot: Vec<RefField>,
}

#[derive(Debug, Serialize)]
struct OutRecord<'a> {
    video_id: &'a str,
    duration_sec: f64,
    frame_count: usize,
    split: Split,
    tsum: &'a str,
    vsum_onehot: Vec<Vec<[usize; 2]>>,
}

fn invalid(video_id: &str, field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        video_id: video_id.to_string(),
        field: field.to_string(),
        message: message.into(),
    }
}

/// Reads and validates an annotation file, attaching cached features when
/// `opts.features` is set.
pub fn load_corpus(path: &Path, opts: &LoadOptions) -> Result<LoadReport> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let store = match &opts.features {
        Some(dir) => Some(FeatureStore::open(dir)?),
        None => None,
    };
    parse_corpus(BufReader::new(file), path, opts, store.as_ref())
}

/// Parses annotation lines from any reader. `origin` is used in error messages.
pub fn parse_corpus<R: BufRead>(
    reader: R,
    origin: &Path,
    opts: &LoadOptions,
    store: Option<&FeatureStore>,
) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(source) => {
                report.errors.push(Error::Json {
                    path: origin.to_path_buf(),
                    line: lineno + 1,
                    source,
                });
                continue;
            }
        };
        match build_sample(raw, opts, store, &mut report.warnings) {
            Ok(s) => report.samples.push(s),
            Err(e) => report.errors.push(e),
        }
    }
    Ok(report)
}

fn build_sample(
    raw: RawRecord,
    opts: &LoadOptions,
    store: Option<&FeatureStore>,
    warnings: &mut Vec<String>,
) -> Result<Sample> {
    let id = raw.video_id.as_str();
    if id.is_empty() || id.contains('/') || id.contains('\\') {
        return Err(invalid(id, "video_id", "must be a non-empty file-name-safe string"));
    }
    if !(raw.duration_sec.is_finite() && raw.duration_sec > 0.0) {
        return Err(invalid(id, "duration_sec", format!("must be positive, got {}", raw.duration_sec)));
    }
    let split = match (&raw.split, opts.default_split) {
        (Some(s), _) => s.parse::<Split>().map_err(|e| invalid(id, "split", e.to_string()))?,
        (None, Some(d)) => d,
        (None, None) => return Err(invalid(id, "split", "missing")),
    };
    let text = match raw.tsum {
        TextField::One(s) => s,
        TextField::Many(v) => v.iter().map(|s| s.trim()).collect::<Vec<_>>().join(" "),
    };
    if crate::text::normalize_words(&text).is_empty() {
        return Err(invalid(id, "tsum", "text summary must be non-empty"));
    }
    if raw.vsum_onehot.len() != opts.annotators {
        return Err(invalid(
            id,
            "vsum_onehot",
            format!(
                "video_refs must have {} entries, found {}",
                opts.annotators,
                raw.vsum_onehot.len()
            ),
        ));
    }

    let onehot_len = raw.vsum_onehot.iter().find_map(|r| match r {
        RefField::OneHot(v) if !v.is_empty() => Some(v.len()),
        _ => None,
    });
    let frame_count = raw
        .frame_count
        .or(onehot_len)
        .unwrap_or_else(|| raw.duration_sec.round() as usize);
    if frame_count < opts.min_frames {
        return Err(invalid(
            id,
            "frame_count",
            format!("{frame_count} frames is shorter than the minimum {}", opts.min_frames),
        ));
    }
    if let Some(max) = opts.max_frames {
        if frame_count > max {
            return Err(invalid(id, "frame_count", format!("{frame_count} frames exceeds {max}")));
        }
    }

    let mut refs = Vec::with_capacity(raw.vsum_onehot.len());
    for (a, field) in raw.vsum_onehot.into_iter().enumerate() {
        let fname = format!("vsum_onehot[{a}]");
        let spans = match field {
            RefField::Spans(pairs) => {
                let mut spans = Vec::with_capacity(pairs.len());
                for [s, e] in pairs {
                    if s < 0 || e <= s || e as usize > frame_count {
                        return Err(invalid(
                            id,
                            &fname,
                            format!("span [{s}, {e}) outside 0..{frame_count} or empty"),
                        ));
                    }
                    spans.push(Span::new(s as usize, e as usize));
                }
                spans
            }
            RefField::OneHot(bits) => {
                if bits.len() != frame_count || bits.iter().any(|b| *b > 1) {
                    return Err(invalid(
                        id,
                        &fname,
                        format!("one-hot vector must hold {frame_count} zeros/ones"),
                    ));
                }
                let labels: Vec<bool> = bits.iter().map(|b| *b == 1).collect();
                super::labels_to_spans(&labels)
            }
        };
        let (normalized, overlapped) = normalize_spans(&spans);
        if overlapped {
            if opts.strict_overlap {
                return Err(invalid(id, &fname, "spans overlap"));
            }
            let msg = format!("{id}: {fname} had overlapping spans; merged");
            warn!("{msg}");
            warnings.push(msg);
        }
        let covered: usize = normalized.iter().map(Span::len).sum();
        if let Some(bound) = opts.max_coverage {
            let limit = (bound * frame_count as f64).ceil() as usize;
            if covered > limit {
                return Err(invalid(
                    id,
                    &fname,
                    format!("covers {covered} frames, above the limit of {limit}"),
                ));
            }
        }
        refs.push(SpanAnnotation::new(a as u8, normalized));
    }

    let frames = match store {
        Some(store) => {
            let feats = store.load(id).map_err(|e| invalid(id, "frames", e.to_string()))?;
            if feats.nrows() != frame_count {
                return Err(invalid(
                    id,
                    "frames",
                    format!("feature store has {} frames, expected {frame_count}", feats.nrows()),
                ));
            }
            FrameData::Features(feats)
        }
        None => FrameData::NotLoaded,
    };

    Ok(Sample {
        video: VideoRecord {
            video_id: raw.video_id.clone(),
            duration_sec: raw.duration_sec,
            frame_count,
            frames,
            split,
        },
        refs: ReferenceSet {
            video_id: raw.video_id,
            video_refs: refs,
            text_summary: text,
        },
    })
}

/// Writes samples in the span-pair annotation format.
pub fn write_corpus(path: &Path, samples: &[Sample]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let rec = OutRecord {
            video_id: &s.video.video_id,
            duration_sec: s.video.duration_sec,
            frame_count: s.video.frame_count,
            split: s.video.split,
            tsum: &s.refs.text_summary,
            vsum_onehot: s
                .refs
                .video_refs
                .iter()
                .map(|r| r.spans.iter().map(|sp| [sp.start, sp.end]).collect())
                .collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Other(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub version: u32,
    pub d_vis: usize,
    pub dtype: String,
    /// Frame count per video id.
    pub videos: BTreeMap<String, usize>,
}

/// Directory of cached frame features.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    root: PathBuf,
    manifest: FeatureManifest,
}

impl FeatureStore {
    pub const MANIFEST: &'static str = "manifest.json";

    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(Self::MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: FeatureManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: mpath.clone(),
            line: 1,
            source,
        })?;
        if manifest.version != FEATURE_STORE_VERSION || manifest.dtype != FEATURE_DTYPE {
            return Err(Error::invalid(format!(
                "unsupported feature store version {} / dtype {}",
                manifest.version, manifest.dtype
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Creates (or extends) a store and writes the given feature matrices.
    pub fn write<'a, I>(root: &Path, d_vis: usize, videos: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a Array2<f64>)>,
    {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut manifest = match Self::open(root) {
            Ok(existing) if existing.manifest.d_vis == d_vis => existing.manifest,
            Ok(existing) => {
                return Err(Error::shape(format!(
                    "store has d_vis {}, writing {d_vis}",
                    existing.manifest.d_vis
                )))
            }
            Err(_) => FeatureManifest {
                version: FEATURE_STORE_VERSION,
                d_vis,
                dtype: FEATURE_DTYPE.to_string(),
                videos: BTreeMap::new(),
            },
        };
        for (id, feats) in videos {
            if feats.ncols() != d_vis {
                return Err(Error::shape(format!("{id}: width {} != {d_vis}", feats.ncols())));
            }
            let path = root.join(format!("{id}.bin"));
            let mut bytes = Vec::with_capacity(feats.len() * 8);
            for v in feats.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            manifest.videos.insert(id.to_string(), feats.nrows());
        }
        let mpath = root.join(Self::MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Other(e.to_string()))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &FeatureManifest {
        &self.manifest
    }

    pub fn d_vis(&self) -> usize {
        self.manifest.d_vis
    }

    pub fn load(&self, video_id: &str) -> Result<Array2<f64>> {
        let frames = *self
            .manifest
            .videos
            .get(video_id)
            .ok_or_else(|| Error::invalid(format!("no cached features for {video_id}")))?;
        let path = self.root.join(format!("{video_id}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let d = self.manifest.d_vis;
        if bytes.len() != frames * d * 8 {
            return Err(Error::shape(format!(
                "{}: {} bytes, expected {frames}×{d} f64",
                path.display(),
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Array2::from_shape_vec((frames, d), values).map_err(|e| Error::shape(e.to_string()))
    }
}
