//! Frozen per-frame encoder, temporal position embeddings and the temporal
//! transformer that turns frame vectors into order-aware features.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameData, VideoRecord, MAX_VIDEO_LEN};
use crate::error::{Error, Result};
use crate::nn::{default_heads, key_padding_mask, EncoderBlock, Linear};
use crate::params::{normal, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Name prefix of the frame encoder's parameters.
pub const FRAME_ENCODER_PREFIX: &str = "frame_encoder.";
pub const TEMPORAL_PREFIX: &str = "temporal.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameEncoderConfig {
    /// Side length of a square patch, in pixels.
    pub patch_size: usize,
    pub channels: usize,
    pub frozen: bool,
}

impl Default for FrameEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            channels: 3,
            frozen: true,
        }
    }
}

/// Maps decoded frames to one vector each.
pub trait FrameEncoder {
    fn output_dim(&self) -> usize;
    fn is_frozen(&self, store: &ParamStore) -> bool;
    /// `frames.len() × output_dim` features on `tape`.
    fn encode(&self, tape: &mut Tape, frames: &[Array3<f32>]) -> Result<Var>;
}

/// Patch embedding followed by GELU and mean pooling over patches.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub config: FrameEncoderConfig,
    pub dim: usize,
    pub proj: Linear,
}

impl PatchEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &FrameEncoderConfig,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = config.patch_size * config.patch_size * config.channels;
        let proj = Linear::new(store, "frame_encoder.proj", fan_in, dim, true, rng);
        store.set_frozen_prefix(FRAME_ENCODER_PREFIX, config.frozen);
        Self {
            config: config.clone(),
            dim,
            proj,
        }
    }

    /// Flattened patches of one frame, `patches × (patch² · channels)`.
    fn patches(&self, frame: &Array3<f32>) -> Result<Array2<f64>> {
        let (h, w, c) = frame.dim();
        let p = self.config.patch_size;
        if c != self.config.channels || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "frame of {h}x{w}x{c} does not tile into {p}x{p}x{} patches",
                self.config.channels
            )));
        }
        let (ph, pw) = (h / p, w / p);
        let mut out = Array2::zeros((ph * pw, p * p * c));
        for by in 0..ph {
            for bx in 0..pw {
                let row = by * pw + bx;
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..c {
                            out[[row, k]] = frame[[by * p + y, bx * p + x, ch]] as f64;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl FrameEncoder for PatchEncoder {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn is_frozen(&self, store: &ParamStore) -> bool {
        store.get(self.proj.weight).frozen
    }

    fn encode(&self, tape: &mut Tape, frames: &[Array3<f32>]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::invalid("no frames to encode"));
        }
        let mut rows = Vec::with_capacity(frames.len());
        for frame in frames {
            let patches = self.patches(frame)?;
            let n = patches.nrows();
            let x = tape.constant(patches);
            let h = self.proj.forward(tape, x);
            let h = tape.gelu(h);
            let pool = tape.constant(Array2::from_elem((1, n), 1.0 / n as f64));
            rows.push(tape.matmul(pool, h));
        }
        Ok(tape.concat_rows(&rows))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TemporalEmbeddingKind {
    #[default]
    Learned,
    Sinusoidal,
}

/// Per-position vectors added to frame features.
#[derive(Debug, Clone)]
pub struct TemporalEmbedding {
    pub kind: TemporalEmbeddingKind,
    pub max_len: usize,
    pub dim: usize,
    /// Present for the learned variant.
    pub table: Option<ParamId>,
}

pub fn sinusoidal_table(max_len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, dim), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl TemporalEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: TemporalEmbeddingKind,
        max_len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = match kind {
            TemporalEmbeddingKind::Learned => {
                Some(store.add("temporal.embedding.table", normal(max_len, dim, 0.02, rng), false))
            }
            TemporalEmbeddingKind::Sinusoidal => None,
        };
        Self {
            kind,
            max_len,
            dim,
            table,
        }
    }

    /// Rows `0..len` of the table.
    pub fn rows(&self, tape: &mut Tape, len: usize) -> Result<Var> {
        if len > self.max_len {
            return Err(Error::invalid(format!(
                "{len} frames exceed the temporal embedding length {}",
                self.max_len
            )));
        }
        let idx: Vec<usize> = (0..len).collect();
        Ok(match self.table {
            Some(id) => {
                let t = tape.param(id);
                tape.gather_rows(t, &idx)
            }
            None => tape.constant(sinusoidal_table(len, self.dim)),
        })
    }

    /// `z[i] + e[i]` for every row.
    pub fn apply(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let (len, dim) = tape.shape(z);
        if dim != self.dim {
            return Err(Error::shape(format!("features have width {dim}, expected {}", self.dim)));
        }
        let e = self.rows(tape, len)?;
        Ok(tape.add(z, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoEncoderConfig {
    pub d_vis: usize,
    /// Temporal transformer depth; 0 disables it.
    pub temporal_layers: usize,
    /// Attention heads; 0 picks one per 64 channels.
    pub heads: usize,
    pub max_len: usize,
    pub embedding: TemporalEmbeddingKind,
    pub ffn_mult: usize,
    pub frame: FrameEncoderConfig,
}

impl Default for VideoEncoderConfig {
    fn default() -> Self {
        Self {
            d_vis: 32,
            temporal_layers: 1,
            heads: 0,
            max_len: MAX_VIDEO_LEN,
            embedding: TemporalEmbeddingKind::Learned,
            ffn_mult: 4,
            frame: FrameEncoderConfig::default(),
        }
    }
}

impl VideoEncoderConfig {
    pub fn heads(&self) -> usize {
        if self.heads == 0 {
            default_heads(self.d_vis)
        } else {
            self.heads
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_vis == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(Error::invalid("video encoder widths and lengths must be positive"));
        }
        if self.d_vis % self.heads() != 0 {
            return Err(Error::invalid(format!(
                "d_vis {} is not divisible by {} heads",
                self.d_vis,
                self.heads()
            )));
        }
        Ok(())
    }
}

/// Frame encoder + temporal embedding + temporal transformer.
#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub config: VideoEncoderConfig,
    pub frames: PatchEncoder,
    pub embedding: TemporalEmbedding,
    pub blocks: Vec<EncoderBlock>,
}

impl VideoEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &VideoEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let frames = PatchEncoder::new(store, &config.frame, config.d_vis, rng);
        let embedding = TemporalEmbedding::new(store, config.embedding, config.max_len, config.d_vis, rng);
        let blocks = (0..config.temporal_layers)
            .map(|l| {
                let name = format!("temporal.block{l}");
                EncoderBlock::new(store, &name, config.d_vis, config.heads(), config.d_vis * config.ffn_mult, rng)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            frames,
            embedding,
            blocks,
        })
    }

    /// Frame features of `video` on the tape: cached features are taken as
    /// given, raw frames go through the frame encoder.
    pub fn frame_features(&self, tape: &mut Tape, video: &VideoRecord) -> Result<Var> {
        match &video.frames {
            FrameData::Features(f) => {
                if f.ncols() != self.config.d_vis {
                    return Err(Error::shape(format!(
                        "video {} has {}-dim features, model expects {}",
                        video.video_id,
                        f.ncols(),
                        self.config.d_vis
                    )));
                }
                Ok(tape.constant(f.clone()))
            }
            FrameData::Raw(frames) => self.frames.encode(tape, frames),
            FrameData::NotLoaded => Err(Error::invalid(format!(
                "video {} has no frames or features loaded",
                video.video_id
            ))),
        }
    }

    /// Frame encoder output as a plain matrix.
    pub fn encode_frames(&self, store: &ParamStore, video: &VideoRecord) -> Result<Array2<f64>> {
        let mut tape = Tape::new(store);
        let z = self.frame_features(&mut tape, video)?;
        Ok(tape.value(z).clone())
    }

    pub fn apply_temporal_embedding(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.embedding.apply(tape, z)
    }

    /// Runs the temporal transformer. `valid[i] == false` marks padding.
    pub fn temporal_forward(&self, tape: &mut Tape, z0: Var, valid: &[bool]) -> Result<Var> {
        let rows = tape.shape(z0).0;
        if valid.len() != rows {
            return Err(Error::shape(format!("mask of length {} for {rows} frames", valid.len())));
        }
        let mask = valid.iter().any(|v| !v).then(|| key_padding_mask(rows, valid));
        let mut x = z0;
        for block in &self.blocks {
            x = block.forward(tape, x, mask.as_ref());
        }
        Ok(x)
    }

    /// Temporal embedding followed by the temporal transformer.
    pub fn forward(&self, tape: &mut Tape, z: Var, valid: &[bool]) -> Result<Var> {
        let z0 = self.apply_temporal_embedding(tape, z)?;
        self.temporal_forward(tape, z0, valid)
    }
}
