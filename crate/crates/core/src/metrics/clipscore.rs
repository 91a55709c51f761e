//! Frame/text dual encoder, its contrastive finetuning, and the
//! frame-to-text similarity score built on it.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, Embedding, LayerNorm, Linear};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::text::{Vocabulary, UNK};

/// Mean cosine between each frame embedding and the text embedding.
/// Inputs are normalised here, so their scale does not matter.
pub fn vt_clipscore(frame_embeddings: ArrayView2<f64>, text_embedding: ArrayView1<f64>) -> Result<f64> {
    if frame_embeddings.nrows() == 0 {
        return Err(Error::invalid("similarity over an empty frame selection"));
    }
    if frame_embeddings.ncols() != text_embedding.len() {
        return Err(Error::shape(format!(
            "frame embeddings of width {} against a text embedding of {}",
            frame_embeddings.ncols(),
            text_embedding.len()
        )));
    }
    let tn = text_embedding.dot(&text_embedding).sqrt();
    let mut total = 0.0;
    for row in frame_embeddings.rows() {
        let fn_ = row.dot(&row).sqrt();
        if fn_ > 0.0 && tn > 0.0 {
            total += row.dot(&text_embedding) / (fn_ * tn);
        }
    }
    Ok(total / frame_embeddings.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualEncoderConfig {
    pub d_vis: usize,
    /// Text encoder width.
    pub d_txt: usize,
    /// Shared embedding width.
    pub d_emb: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_words: usize,
    /// Initial softmax temperature.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            d_vis: 32,
            d_txt: 32,
            d_emb: 32,
            heads: 2,
            layers: 1,
            max_words: 64,
            temperature: 0.07,
            seed: 0,
        }
    }
}

/// Largest allowed logit scale, `ln 100`.
const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: DualEncoderConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    frame_hidden: Linear,
    frame_out: Linear,
    token_embedding: Embedding,
    position_embedding: Embedding,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    text_out: Linear,
    /// Log of the logit scale (inverse temperature).
    log_scale: ParamId,
}

/// Contrastive loss of one batch, split by direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveLoss {
    pub video_to_text: f64,
    pub text_to_video: f64,
}

impl ContrastiveLoss {
    pub fn mean(&self) -> f64 {
        0.5 * (self.video_to_text + self.text_to_video)
    }
}

impl DualEncoder {
    pub fn new(config: &DualEncoderConfig, vocab: Vocabulary) -> Result<Self> {
        if config.d_txt % config.heads.max(1) != 0 || config.heads == 0 || config.max_words == 0 {
            return Err(Error::invalid("dual encoder: d_txt must be divisible by a positive head count"));
        }
        if !(config.temperature > 0.0) {
            return Err(Error::invalid("dual encoder temperature must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (dv, dt, de) = (config.d_vis, config.d_txt, config.d_emb);
        let frame_hidden = Linear::new(&mut store, "clip.frame.hidden", dv, de, true, &mut rng);
        let frame_out = Linear::new(&mut store, "clip.frame.out", de, de, true, &mut rng);
        let token_embedding = Embedding::new(&mut store, "clip.text.token_embedding", vocab.len(), dt, &mut rng);
        let position_embedding = Embedding::new(&mut store, "clip.text.position_embedding", config.max_words, dt, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| EncoderBlock::new(&mut store, &format!("clip.text.block{l}"), dt, config.heads, 4 * dt, &mut rng))
            .collect();
        let final_norm = LayerNorm::new(&mut store, "clip.text.final_norm", dt);
        let text_out = Linear::new(&mut store, "clip.text.out", dt, de, true, &mut rng);
        let log_scale = store.add(
            "clip.log_scale",
            Array2::from_elem((1, 1), (1.0 / config.temperature).ln()),
            false,
        );
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            frame_hidden,
            frame_out,
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            text_out,
            log_scale,
        })
    }

    pub fn logit_scale(&self) -> f64 {
        self.store.value(self.log_scale)[[0, 0]].exp()
    }

    /// Token ids used for `text`; an empty text becomes a single `[UNK]`.
    pub fn text_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = self.vocab.tokenize(text);
        ids.truncate(self.config.max_words);
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }

    /// Normalised frame embeddings, one row per input frame.
    fn frames_on_tape(&self, tape: &mut Tape, frames: &Array2<f64>) -> Result<Var> {
        if frames.ncols() != self.config.d_vis {
            return Err(Error::shape(format!(
                "frame features of width {}, dual encoder expects {}",
                frames.ncols(),
                self.config.d_vis
            )));
        }
        let x = tape.constant(frames.clone());
        let h = self.frame_hidden.forward(tape, x);
        let h = tape.gelu(h);
        let h = self.frame_out.forward(tape, h);
        Ok(tape.l2_normalize_rows(h))
    }

    /// Normalised `1 × d_emb` text embedding.
    fn text_on_tape(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = self.token_embedding.forward(tape, ids);
        let pos = self.position_embedding.forward(tape, &positions);
        let mut x = tape.add(tok, pos);
        for block in &self.blocks {
            x = block.forward(tape, x, None);
        }
        let x = self.final_norm.forward(tape, x);
        let pool = tape.constant(Array2::from_elem((1, ids.len()), 1.0 / ids.len() as f64));
        let pooled = tape.matmul(pool, x);
        let e = self.text_out.forward(tape, pooled);
        tape.l2_normalize_rows(e)
    }

    pub fn frame_embeddings(&self, frames: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.store);
        let e = self.frames_on_tape(&mut tape, frames)?;
        Ok(tape.value(e).clone())
    }

    pub fn text_embedding(&self, text: &str) -> Array1<f64> {
        let mut tape = Tape::new(&self.store);
        let e = self.text_on_tape(&mut tape, &self.text_ids(text));
        tape.value(e).row(0).to_owned()
    }

    /// Similarity of a set of frames (frame-encoder features) and a text.
    pub fn score(&self, frames: &Array2<f64>, text: &str) -> Result<f64> {
        if frames.nrows() == 0 {
            return Err(Error::invalid("similarity over an empty frame selection"));
        }
        let f = self.frame_embeddings(frames)?;
        vt_clipscore(f.view(), self.text_embedding(text).view())
    }

    /// Symmetric in-batch contrastive loss on `tape`. The video side of each
    /// pair is the mean of its normalised frame embeddings, so a logit is the
    /// scaled similarity score itself.
    fn batch_loss(&self, tape: &mut Tape, batch: &[&ClipPair]) -> Result<(Var, ContrastiveLoss)> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::invalid("contrastive batches need at least two pairs"));
        }
        let mut videos = Vec::with_capacity(b);
        let mut texts = Vec::with_capacity(b);
        for pair in batch {
            if pair.frames.nrows() == 0 {
                return Err(Error::invalid("pair without frames"));
            }
            let f = self.frames_on_tape(tape, &pair.frames)?;
            let n = pair.frames.nrows();
            let pool = tape.constant(Array2::from_elem((1, n), 1.0 / n as f64));
            videos.push(tape.matmul(pool, f));
            texts.push(self.text_on_tape(tape, &self.text_ids(&pair.text)));
        }
        let v = tape.concat_rows(&videos);
        let t = tape.concat_rows(&texts);
        let sim = tape.matmul_t(v, t);
        let log_scale = tape.param(self.log_scale);
        let scale = tape.exp(log_scale);
        let ones = tape.constant(Array2::ones((1, b)));
        let scale_row = tape.matmul(scale, ones);
        let logits = tape.mul_row(sim, scale_row);
        let logits_t = tape.transpose(logits);
        let diag: Vec<usize> = (0..b).collect();
        let all = vec![true; b];
        let v2t = tape.cross_entropy_sum(logits, &diag, &all);
        let t2v = tape.cross_entropy_sum(logits_t, &diag, &all);
        let total = tape.add(v2t, t2v);
        let loss = tape.scale(total, 0.5 / b as f64);
        let parts = ContrastiveLoss {
            video_to_text: tape.scalar(v2t) / b as f64,
            text_to_video: tape.scalar(t2v) / b as f64,
        };
        Ok((loss, parts))
    }

    /// Loss of one batch without updating anything.
    pub fn contrastive_loss(&self, batch: &[&ClipPair]) -> Result<ContrastiveLoss> {
        let mut tape = Tape::new(&self.store);
        Ok(self.batch_loss(&mut tape, batch)?.1)
    }
}

/// JSON header of a saved dual encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderHeader {
    pub config: DualEncoderConfig,
    pub vocab: Vocabulary,
}

impl DualEncoder {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DualEncoderHeader {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        checkpoint::save(path, &header, &self.store, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = checkpoint::load::<DualEncoderHeader>(path)?;
        let mut model = DualEncoder::new(&raw.header.config, raw.header.vocab)?;
        model.store.load_values(&raw.params)?;
        Ok(model)
    }
}

/// Summary frames (frame-encoder features) paired with a text summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub frames: Array2<f64>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub model: DualEncoderConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            model: DualEncoderConfig::default(),
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Trains a dual encoder on aligned pairs. Returns the encoder and the loss
/// of every step.
pub fn finetune_dual_encoder(
    pairs: &[ClipPair],
    vocab: Vocabulary,
    cfg: &ContrastiveConfig,
) -> Result<(DualEncoder, Vec<f64>)> {
    if cfg.batch_size < 2 {
        return Err(Error::invalid("contrastive batch size must be at least 2"));
    }
    if pairs.len() < 2 {
        return Err(Error::invalid("contrastive finetuning needs at least two pairs"));
    }
    let mut model = DualEncoder::new(&cfg.model, vocab)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch_size.min(pairs.len());
    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut fresh: Vec<usize> = (0..pairs.len()).collect();
            fresh.shuffle(&mut rng);
            order = fresh;
        }
        let idx: Vec<usize> = order.drain(..bs).collect();
        let batch: Vec<&ClipPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let grads = {
            let mut tape = Tape::new(&model.store);
            let (loss, _) = model.batch_loss(&mut tape, &batch)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "contrastive loss".into(),
                    detail: format!("step {step}: {value}"),
                });
            }
            losses.push(value);
            let g = tape.backward(loss);
            let mut dense = vec![None; model.store.len()];
            for (id, m) in g.params() {
                dense[id.index()] = Some(m.clone());
            }
            dense
        };
        let lr = lr_at(step as u64, cfg.steps as u64, cfg.lr);
        opt.step(&mut model.store, &grads, lr)?;
        let s = model.store.value_mut(model.log_scale);
        s[[0, 0]] = s[[0, 0]].min(MAX_LOG_SCALE);
    }
    Ok((model, losses))
}

/// Mean similarity of matched pairs, of word-shuffled texts and of
/// mismatched pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProbe {
    pub positive: f64,
    pub shuffled: f64,
    pub negative: f64,
}

/// Scores every pair against its own text, a word-shuffled copy of it, and
/// the next pair's text.
pub fn similarity_probe(model: &DualEncoder, pairs: &[ClipPair], seed: u64) -> Result<SimilarityProbe> {
    if pairs.len() < 2 {
        return Err(Error::invalid("similarity probe needs at least two pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut shuf, mut neg) = (0.0, 0.0, 0.0);
    for (i, pair) in pairs.iter().enumerate() {
        pos += model.score(&pair.frames, &pair.text)?;
        shuf += model.score(&pair.frames, &shuffle_words(&pair.text, &mut rng))?;
        neg += model.score(&pair.frames, &pairs[(i + 1) % pairs.len()].text)?;
    }
    let n = pairs.len() as f64;
    Ok(SimilarityProbe {
        positive: pos / n,
        shuffled: shuf / n,
        negative: neg / n,
    })
}

/// Random reordering of the words of `text`, different from the original
/// whenever the words are not all equal.
pub fn shuffle_words(text: &str, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = words.clone();
    for _ in 0..16 {
        out.shuffle(rng);
        if out != words {
            return out.join(" ");
        }
    }
    let k = 1.min(out.len());
    out.rotate_left(k);
    out.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn score_examples() {
        let t = array![1.0, 0.0];
        assert!((vt_clipscore(array![[2.0, 0.0]].view(), t.view()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(vt_clipscore(array![[0.0, 3.0]].view(), t.view()).unwrap(), 0.0);
        // cosines 0.2 and 0.6
        let f = array![[0.2, (1.0f64 - 0.04).sqrt()], [0.6, 0.8]];
        assert!((vt_clipscore(f.view(), t.view()).unwrap() - 0.4).abs() < 1e-12);
        assert!(vt_clipscore(Array2::<f64>::zeros((0, 2)).view(), t.view()).is_err());
        let scaled = &f * 7.5;
        assert!((vt_clipscore(scaled.view(), (&t * 0.1).view()).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn identical_pairs_give_ln2() {
        let vocab = Vocabulary::build(["a dog"], 1);
        let cfg = DualEncoderConfig {
            d_vis: 4,
            d_txt: 4,
            d_emb: 4,
            heads: 1,
            ..Default::default()
        };
        let model = DualEncoder::new(&cfg, vocab).unwrap();
        let p = ClipPair {
            frames: array![[0.3, -0.1, 0.2, 0.5]],
            text: "a dog".into(),
        };
        let loss = model.contrastive_loss(&[&p, &p]).unwrap();
        assert!((loss.video_to_text - 2f64.ln()).abs() < 1e-12);
        assert!((loss.text_to_video - 2f64.ln()).abs() < 1e-12);
        assert!(model.contrastive_loss(&[&p]).is_err());
        let err = finetune_dual_encoder(
            &[p.clone(), p.clone()],
            Vocabulary::default(),
            &ContrastiveConfig {
                batch_size: 1,
                ..Default::default()
            },
        );
        assert!(err.is_err());
    }

    #[test]
    fn shuffle_changes_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_ne!(shuffle_words("a b", &mut rng), "a b");
        }
        assert_eq!(shuffle_words("a a", &mut rng), "a a");
    }
}
