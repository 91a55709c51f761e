//! The joint model: shared video encoder feeding the video-summary and
//! text-summary heads.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::VideoRecord;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::text::{Vocabulary, DEFAULT_PROMPT};
use crate::tsum::{DecodeMode, TextDecoder, TextDecoderConfig, DEFAULT_MAX_GEN_LEN};
use crate::video_encoder::{VideoEncoder, VideoEncoderConfig};
use crate::vsum::{select_topk, SummarySelection, VsumConfig, VsumDecoder, DEFAULT_BUDGET_RATIO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub video: VideoEncoderConfig,
    pub vsum: VsumConfig,
    pub text: TextDecoderConfig,
    pub max_gen_len: usize,
    pub prompt: String,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video: VideoEncoderConfig::default(),
            vsum: VsumConfig::default(),
            text: TextDecoderConfig::default(),
            max_gen_len: DEFAULT_MAX_GEN_LEN,
            prompt: DEFAULT_PROMPT.to_string(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of a value's JSON serialisation.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialises");
    hex::encode(Sha256::digest(&json))
}

/// Inference settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    pub budget_ratio: f64,
    pub decode: DecodeMode,
    pub max_gen_len: usize,
    /// Skip text generation.
    pub skip_text: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            budget_ratio: DEFAULT_BUDGET_RATIO,
            decode: DecodeMode::Greedy,
            max_gen_len: DEFAULT_MAX_GEN_LEN,
            skip_text: false,
        }
    }
}

/// Model outputs for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub video_id: String,
    /// One score per frame of the full video; frames past the encoder's
    /// length limit score 0.
    pub scores: Vec<f64>,
    pub selection: SummarySelection,
    pub tokens: Vec<usize>,
    pub summary: String,
    /// Frame-encoder output for every frame.
    pub frame_features: Array2<f64>,
}

/// Forward outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Temporal features, `T × d_vis`.
    pub features: Var,
    /// Frame scores, `T × 1`.
    pub scores: Var,
}

#[derive(Debug, Clone)]
pub struct VtsumModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: VideoEncoder,
    pub vsum: VsumDecoder,
    pub tsum: TextDecoder,
    pub prompt_ids: Vec<usize>,
}

impl VtsumModel {
    pub fn new(config: &ModelConfig, vocab: Vocabulary) -> Result<Self> {
        let prompt_ids = vocab.tokenize(&config.prompt);
        if prompt_ids.is_empty() {
            return Err(Error::invalid("decoder prompt is empty"));
        }
        if config.max_gen_len == 0 {
            return Err(Error::invalid("max_gen_len must be positive"));
        }
        let mut config = config.clone();
        config.text.max_positions = prompt_ids.len() + config.max_gen_len;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = VideoEncoder::new(&mut store, &config.video, &mut rng)?;
        let vsum = VsumDecoder::new(&mut store, config.video.d_vis, &config.vsum, &mut rng)?;
        let tsum = TextDecoder::new(&mut store, &config.text, vocab.len(), config.video.d_vis, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            vsum,
            tsum,
            prompt_ids,
        })
    }

    /// Frame features of `video`, truncated to the encoder's length limit.
    pub fn frame_features(&self, tape: &mut Tape, video: &VideoRecord) -> Result<Var> {
        let z = self.encoder.frame_features(tape, video)?;
        self.truncate(tape, z, &video.video_id)
    }

    fn truncate(&self, tape: &mut Tape, z: Var, video_id: &str) -> Result<Var> {
        let rows = tape.shape(z).0;
        if rows == 0 {
            return Err(Error::invalid(format!("video {video_id} has no frames")));
        }
        let limit = self.config.video.max_len;
        Ok(if rows > limit {
            let idx: Vec<usize> = (0..limit).collect();
            tape.gather_rows(z, &idx)
        } else {
            z
        })
    }

    /// Temporal features and frame scores for (possibly padded) frame
    /// features `z`.
    pub fn forward_features(&self, tape: &mut Tape, z: Var, valid: &[bool]) -> Result<Encoded> {
        let features = self.encoder.forward(tape, z, valid)?;
        let scores = self.vsum.forward(tape, features, valid)?;
        Ok(Encoded { features, scores })
    }

    pub fn forward(&self, tape: &mut Tape, video: &VideoRecord) -> Result<Encoded> {
        let z = self.frame_features(tape, video)?;
        let valid = vec![true; tape.shape(z).0];
        self.forward_features(tape, z, &valid)
    }

    pub fn predict(&self, video: &VideoRecord, opts: &InferenceOptions) -> Result<Prediction> {
        let mut tape = Tape::new(&self.store);
        let raw = self.encoder.frame_features(&mut tape, video)?;
        let frame_features = tape.value(raw).clone();
        let z = self.truncate(&mut tape, raw, &video.video_id)?;
        let valid = vec![true; tape.shape(z).0];
        let enc = self.forward_features(&mut tape, z, &valid)?;
        let total = frame_features.nrows();
        let mut scores = vec![0.0; total];
        for (i, p) in tape.value(enc.scores).column(0).iter().enumerate() {
            scores[i] = *p;
        }
        let selection = select_topk(&scores, opts.budget_ratio);
        let tokens = if opts.skip_text {
            Vec::new()
        } else {
            let ctx = tape.value(enc.features).clone();
            let valid = vec![true; ctx.nrows()];
            let max_len = opts.max_gen_len.min(self.config.max_gen_len);
            self.tsum.generate(&self.store, &ctx, &valid, &self.prompt_ids, max_len, opts.decode)?
        };
        let summary = self.vocab.detokenize(&tokens);
        Ok(Prediction {
            video_id: video.video_id.clone(),
            scores,
            selection,
            tokens,
            summary,
            frame_features,
        })
    }

    /// Temporal features only (`T × d_vis`) for a video.
    pub fn temporal_features(&self, video: &VideoRecord) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.store);
        let enc = self.forward(&mut tape, video)?;
        Ok(tape.value(enc.features).clone())
    }
}
