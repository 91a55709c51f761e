//! Video summary head: windowed context aggregation, per-frame importance
//! scores, the frame-level BCE loss and budgeted top-k selection.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tape::{Mat, Tape, Var, MASK_NEG};

pub const VSUM_PREFIX: &str = "vsum.";
pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_BUDGET_RATIO: f64 = 0.15;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary band matrix: entry `(i, j)` is 1 iff `|i - j| <= (window - 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAttentionMap {
    pub window: usize,
    pub mask: Mat,
}

impl LocalAttentionMap {
    pub fn len(&self) -> usize {
        self.mask.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]] != 0.0
    }
}

pub fn build_local_mask(frames: usize, window: usize) -> Result<LocalAttentionMap> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("window must be a positive odd integer, got {window}")));
    }
    let half = (window - 1) / 2;
    let mask = Array2::from_shape_fn((frames, frames), |(i, j)| {
        if i.abs_diff(j) <= half {
            1.0
        } else {
            0.0
        }
    });
    Ok(LocalAttentionMap { window, mask })
}

/// Where the band is applied relative to the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BandMasking {
    /// Softmax over the full row, then multiply by the band. Rows are not
    /// renormalised, so weights near the edges of a long row sum to < 1.
    #[default]
    PostSoftmax,
    /// Additive mask before the softmax; rows renormalise inside the band.
    PreSoftmax,
}

/// Windowed self-attention over `q`, `k`, `v` (all `T × d`).
///
/// Padding keys (`key_valid[j] == false`) are removed with an additive
/// mask before the softmax in both variants.
pub fn context_aggregate(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    band: &LocalAttentionMap,
    key_valid: &[bool],
    masking: BandMasking,
) -> Result<Var> {
    let (t, d) = tape.shape(q);
    if tape.shape(k) != (t, d) || tape.shape(v).0 != t || band.len() != t || key_valid.len() != t {
        return Err(Error::shape(format!(
            "context aggregation over {t} frames got k {:?}, v {:?}, band {}, mask {}",
            tape.shape(k),
            tape.shape(v),
            band.len(),
            key_valid.len()
        )));
    }
    let scores = tape.matmul_t(q, k);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let additive = |keep: &dyn Fn(usize, usize) -> bool| -> Mat {
        Array2::from_shape_fn((t, t), |(i, j)| if keep(i, j) { 0.0 } else { MASK_NEG })
    };
    let out = match masking {
        BandMasking::PostSoftmax => {
            let scores = if key_valid.iter().all(|v| *v) {
                scores
            } else {
                let m = tape.constant(additive(&|_, j| key_valid[j]));
                tape.add(scores, m)
            };
            let w = tape.softmax_rows(scores);
            let m = tape.constant(band.mask.clone());
            let w = tape.mul(w, m);
            tape.matmul(w, v)
        }
        BandMasking::PreSoftmax => {
            let m = tape.constant(additive(&|i, j| key_valid[j] && band.contains(i, j)));
            let scores = tape.add(scores, m);
            let w = tape.softmax_rows(scores);
            tape.matmul(w, v)
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VsumConfig {
    /// Disable to score temporal features directly.
    pub context_aggregation: bool,
    pub window: usize,
    pub masking: BandMasking,
}

impl Default for VsumConfig {
    fn default() -> Self {
        Self {
            context_aggregation: true,
            window: DEFAULT_WINDOW,
            masking: BandMasking::PostSoftmax,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContextAggregation {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

#[derive(Debug, Clone)]
pub struct VsumDecoder {
    pub config: VsumConfig,
    pub aggregation: Option<ContextAggregation>,
    pub classifier: Linear,
}

impl VsumDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, config: &VsumConfig, rng: &mut R) -> Result<Self> {
        if config.window == 0 || config.window % 2 == 0 {
            return Err(Error::invalid(format!("window must be a positive odd integer, got {}", config.window)));
        }
        let aggregation = config.context_aggregation.then(|| ContextAggregation {
            query: Linear::new(store, "vsum.ca.query", dim, dim, true, rng),
            key: Linear::new(store, "vsum.ca.key", dim, dim, true, rng),
            value: Linear::new(store, "vsum.ca.value", dim, dim, true, rng),
        });
        let classifier = Linear::new(store, "vsum.classifier", dim, 1, true, rng);
        Ok(Self {
            config: config.clone(),
            aggregation,
            classifier,
        })
    }

    /// Aggregated features `A_loc` (or the input when aggregation is off).
    pub fn aggregate(&self, tape: &mut Tape, z: Var, valid: &[bool]) -> Result<Var> {
        let Some(ca) = &self.aggregation else {
            return Ok(z);
        };
        let band = build_local_mask(tape.shape(z).0, self.config.window)?;
        let q = ca.query.forward(tape, z);
        let k = ca.key.forward(tape, z);
        let v = ca.value.forward(tape, z);
        context_aggregate(tape, q, k, v, &band, valid, self.config.masking)
    }

    /// `T × 1` importance probabilities.
    pub fn score_frames(&self, tape: &mut Tape, features: Var) -> Var {
        let logits = self.classifier.forward(tape, features);
        tape.sigmoid(logits)
    }

    pub fn forward(&self, tape: &mut Tape, z: Var, valid: &[bool]) -> Result<Var> {
        let a = self.aggregate(tape, z, valid)?;
        Ok(self.score_frames(tape, a))
    }
}

/// Mean BCE of `p` (`T × 1`) against `labels` over frames where `valid` holds.
pub fn vsum_loss(tape: &mut Tape, p: Var, labels: &[bool], valid: &[bool]) -> Result<Var> {
    let (rows, cols) = tape.shape(p);
    if cols != 1 || rows != labels.len() || rows != valid.len() {
        return Err(Error::shape(format!(
            "{rows}x{cols} scores against {} labels and {} mask entries",
            labels.len(),
            valid.len()
        )));
    }
    let targets: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    Ok(tape.bce_mean(p, &targets, valid, PROB_CLAMP))
}

/// Frames kept for a summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySelection {
    pub keep: Vec<bool>,
    pub budget_ratio: f64,
}

impl SummarySelection {
    pub fn indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect()
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }
}

/// `max(1, round(ratio · frames))` with halves rounded up.
pub fn budget(frames: usize, ratio: f64) -> usize {
    // The epsilon absorbs representation error in products such as 0.15 · 10.
    let k = (ratio * frames as f64 + 0.5 + 1e-9).floor() as usize;
    k.clamp(1, frames.max(1))
}

/// Keeps the `budget(T)` highest scores; equal scores favour earlier frames.
pub fn select_topk(scores: &[f64], ratio: f64) -> SummarySelection {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    if !scores.is_empty() {
        for &i in &order[..budget(scores.len(), ratio)] {
            keep[i] = true;
        }
    }
    SummarySelection {
        keep,
        budget_ratio: ratio,
    }
}
