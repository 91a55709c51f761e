//! Text summary head: a causal transformer decoder with cross-attention over
//! video features, its NLL loss and greedy / beam-search generation.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, default_heads, key_padding_mask, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tape::{Mat, Tape, Var};
use crate::text::EOS;

pub const TSUM_PREFIX: &str = "tsum.";
pub const DEFAULT_MAX_GEN_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextDecoderConfig {
    pub d_txt: usize,
    pub layers: usize,
    /// 0 picks one head per 64 channels.
    pub heads: usize,
    pub ffn_mult: usize,
    /// Longest input sequence (prompt plus generated tokens).
    pub max_positions: usize,
}

impl Default for TextDecoderConfig {
    fn default() -> Self {
        Self {
            d_txt: 32,
            layers: 2,
            heads: 0,
            ffn_mult: 4,
            max_positions: DEFAULT_MAX_GEN_LEN + 8,
        }
    }
}

impl TextDecoderConfig {
    pub fn heads(&self) -> usize {
        if self.heads == 0 {
            default_heads(self.d_txt)
        } else {
            self.heads
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    fn forward(&self, tape: &mut Tape, x: Var, ctx: Var, causal: &Mat, ctx_mask: Option<&Mat>) -> Var {
        let h = self.norm1.forward(tape, x);
        let h = self.self_attn.forward(tape, h, h, Some(causal));
        let x = tape.add(x, h);
        let h = self.norm2.forward(tape, x);
        let h = self.cross_attn.forward(tape, h, ctx, ctx_mask);
        let x = tape.add(x, h);
        let h = self.norm3.forward(tape, x);
        let h = self.ffn.forward(tape, h);
        tape.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct TextDecoder {
    pub config: TextDecoderConfig,
    pub vocab_size: usize,
    pub token_embedding: Embedding,
    pub position_embedding: Embedding,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}

impl TextDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &TextDecoderConfig,
        vocab_size: usize,
        d_ctx: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.d_txt;
        let heads = config.heads();
        if d == 0 || d % heads != 0 || config.max_positions == 0 || vocab_size == 0 {
            return Err(Error::invalid(format!(
                "text decoder needs positive sizes and d_txt divisible by heads (d_txt {d}, heads {heads})"
            )));
        }
        let blocks = (0..config.layers)
            .map(|l| {
                let name = format!("tsum.block{l}");
                DecoderBlock {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, d, heads, rng),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, d_ctx, heads, rng),
                    norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d * config.ffn_mult, rng),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            vocab_size,
            token_embedding: Embedding::new(store, "tsum.token_embedding", vocab_size, d, rng),
            position_embedding: Embedding::new(store, "tsum.position_embedding", config.max_positions, d, rng),
            blocks,
            final_norm: LayerNorm::new(store, "tsum.final_norm", d),
            output: Linear::new(store, "tsum.output", d, vocab_size, true, rng),
        })
    }

    /// `ids.len() × |V|` next-token logits. Row `t` depends on `ids[..=t]`
    /// and on the unmasked rows of `ctx`.
    pub fn forward(&self, tape: &mut Tape, ctx: Var, ctx_valid: &[bool], ids: &[usize]) -> Result<Var> {
        let len = ids.len();
        if len == 0 {
            return Err(Error::invalid("empty decoder input"));
        }
        if len > self.config.max_positions {
            return Err(Error::invalid(format!(
                "decoder input of {len} tokens exceeds the configured maximum {}",
                self.config.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside a vocabulary of {}", self.vocab_size)));
        }
        if ctx_valid.len() != tape.shape(ctx).0 {
            return Err(Error::shape(format!(
                "video mask of length {} for {} frames",
                ctx_valid.len(),
                tape.shape(ctx).0
            )));
        }
        let positions: Vec<usize> = (0..len).collect();
        let tok = self.token_embedding.forward(tape, ids);
        let pos = self.position_embedding.forward(tape, &positions);
        let mut x = tape.add(tok, pos);
        let causal = causal_mask(len);
        let ctx_mask = ctx_valid.iter().any(|v| !v).then(|| key_padding_mask(len, ctx_valid));
        for block in &self.blocks {
            x = block.forward(tape, x, ctx, &causal, ctx_mask.as_ref());
        }
        let x = self.final_norm.forward(tape, x);
        Ok(self.output.forward(tape, x))
    }

    /// Generated token ids after `prompt`, without the prompt and without
    /// the closing `[EOS]`. At most `max_len` tokens are produced, `[EOS]`
    /// included.
    pub fn generate(
        &self,
        store: &ParamStore,
        ctx: &Mat,
        ctx_valid: &[bool],
        prompt: &[usize],
        max_len: usize,
        mode: DecodeMode,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::invalid("generation needs a non-empty prompt"));
        }
        if prompt.len() + max_len.saturating_sub(1) > self.config.max_positions {
            return Err(Error::invalid(format!(
                "prompt of {} plus {max_len} generated tokens exceeds the decoder's {} positions",
                prompt.len(),
                self.config.max_positions
            )));
        }
        match mode {
            DecodeMode::Greedy => self.greedy(store, ctx, ctx_valid, prompt, max_len),
            DecodeMode::Beam(k) => self.beam(store, ctx, ctx_valid, prompt, max_len, k),
        }
    }

    fn next_log_probs(&self, store: &ParamStore, ctx: &Mat, ctx_valid: &[bool], seq: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let c = tape.constant(ctx.clone());
        let logits = self.forward(&mut tape, c, ctx_valid, seq)?;
        let row = tape.value(logits).row(seq.len() - 1).to_owned();
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.fold(0.0, |a, &x| a + (x - max).exp()).ln();
        Ok(row.iter().map(|x| x - lse).collect())
    }

    fn greedy(&self, store: &ParamStore, ctx: &Mat, ctx_valid: &[bool], prompt: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        for _ in 0..max_len {
            let lp = self.next_log_probs(store, ctx, ctx_valid, &seq)?;
            let next = argmax(&lp);
            if next == EOS {
                break;
            }
            seq.push(next);
        }
        Ok(seq[prompt.len()..].to_vec())
    }

    fn beam(
        &self,
        store: &ParamStore,
        ctx: &Mat,
        ctx_valid: &[bool],
        prompt: &[usize],
        max_len: usize,
        width: usize,
    ) -> Result<Vec<usize>> {
        if width == 0 {
            return Err(Error::invalid("beam width must be at least 1"));
        }
        // (generated tokens, cumulative log-prob)
        let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
        for step in 0..max_len {
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
            for (b, (gen, score)) in live.iter().enumerate() {
                let mut seq = prompt.to_vec();
                seq.extend_from_slice(gen);
                let lp = self.next_log_probs(store, ctx, ctx_valid, &seq)?;
                candidates.extend(lp.iter().enumerate().map(|(tok, l)| (b, tok, score + l)));
            }
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut next = Vec::new();
            for &(b, tok, score) in candidates.iter().take(width - done.len()) {
                let mut gen = live[b].0.clone();
                gen.push(tok);
                if tok == EOS || step + 1 == max_len {
                    done.push((gen, score));
                } else {
                    next.push((gen, score));
                }
            }
            live = next;
            if live.is_empty() || done.len() >= width {
                break;
            }
        }
        let best = done
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                let na = a.1 / a.0.len() as f64;
                let nb = b.1 / b.0.len() as f64;
                na.total_cmp(&nb).then(ib.cmp(ia))
            })
            .map(|(_, c)| c.0.clone())
            .unwrap_or_default();
        Ok(best.into_iter().filter(|&t| t != EOS).collect())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    Greedy,
    /// Beam search of the given width, length-normalised.
    Beam(usize),
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Greedy => write!(f, "greedy"),
            DecodeMode::Beam(k) => write!(f, "beam:{k}"),
        }
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(DecodeMode::Greedy);
        }
        if let Some(k) = s.strip_prefix("beam:") {
            let k: usize = k.parse().map_err(|_| Error::invalid(format!("bad beam width in `{s}`")))?;
            if k == 0 {
                return Err(Error::invalid("beam width must be at least 1"));
            }
            return Ok(DecodeMode::Beam(k));
        }
        Err(Error::invalid(format!("decode mode `{s}` is not `greedy` or `beam:<k>`")))
    }
}

impl Serialize for DecodeMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DecodeMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Decoder input and supervision for one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTarget {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub supervised: Vec<bool>,
}

impl TextTarget {
    /// `prompt + words + [EOS]`, shifted by one. Words beyond
    /// `max_len - 1` are dropped so the target fits the generation limit.
    pub fn new(prompt: &[usize], words: &[usize], max_len: usize) -> Result<Self> {
        if prompt.is_empty() || max_len == 0 {
            return Err(Error::invalid("text target needs a prompt and a positive length"));
        }
        let keep = words.len().min(max_len - 1);
        let mut full = prompt.to_vec();
        full.extend_from_slice(&words[..keep]);
        full.push(EOS);
        let n = full.len();
        Ok(Self {
            input: full[..n - 1].to_vec(),
            targets: full[1..].to_vec(),
            supervised: (1..n).map(|i| i >= prompt.len()).collect(),
        })
    }

    pub fn supervised_count(&self) -> usize {
        self.supervised.iter().filter(|s| **s).count()
    }
}

/// Summed NLL of `targets` over supervised rows of `logits`.
pub fn tsum_loss(tape: &mut Tape, logits: Var, targets: &[usize], supervised: &[bool]) -> Result<Var> {
    let (rows, vocab) = tape.shape(logits);
    if rows != targets.len() || rows != supervised.len() {
        return Err(Error::shape(format!(
            "{rows} logit rows against {} targets and {} flags",
            targets.len(),
            supervised.len()
        )));
    }
    if !supervised.iter().any(|s| *s) {
        return Err(Error::invalid("no supervised positions in the text target"));
    }
    if let Some(&bad) = targets.iter().zip(supervised).find(|(t, s)| **s && **t >= vocab).map(|(t, _)| t) {
        return Err(Error::invalid(format!("target id {bad} outside a vocabulary of {vocab}")));
    }
    Ok(tape.cross_entropy_sum(logits, targets, supervised))
}

/// Per-token mean of the summed NLL, for logging.
pub fn per_token(sum_nll: f64, supervised: &[bool]) -> f64 {
    sum_nll / supervised.iter().filter(|s| **s).count().max(1) as f64
}

/// Convenience: logits as a plain matrix for a single forward pass.
pub fn logits(decoder: &TextDecoder, store: &ParamStore, ctx: &Mat, ctx_valid: &[bool], ids: &[usize]) -> Result<Array2<f64>> {
    let mut tape = Tape::new(store);
    let c = tape.constant(ctx.clone());
    let l = decoder.forward(&mut tape, c, ctx_valid, ids)?;
    Ok(tape.value(l).clone())
}
