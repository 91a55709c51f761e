//! Transformer building blocks on top of [`Tape`].

use ndarray::Array2;
use rand::Rng;

use crate::params::{normal, xavier_uniform, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var, MASK_NEG};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(fan_in, fan_out, rng), false);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)), false));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim)), false),
            shift: store.add(format!("{name}.shift"), Array2::zeros((1, dim)), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.param(self.gain);
        let b = tape.param(self.shift);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.add(format!("{name}.table"), normal(rows, dim, 0.02, rng), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids)
    }
}

/// `softmax(q kᵀ / sqrt(d) + mask) v` for a single head.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Var {
    let d = tape.shape(q).1 as f64;
    let scores = tape.matmul_t(q, k);
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let scores = match mask {
        Some(m) => tape.add(scores, m),
        None => scores,
    };
    let w = tape.softmax_rows(scores);
    tape.matmul(w, v)
}

/// Additive mask that hides key columns where `key_valid` is false.
pub fn key_padding_mask(rows: usize, key_valid: &[bool]) -> Mat {
    Array2::from_shape_fn((rows, key_valid.len()), |(_, j)| {
        if key_valid[j] {
            0.0
        } else {
            MASK_NEG
        }
    })
}

/// Additive mask allowing query `i` to see keys `0..=i` only.
pub fn causal_mask(len: usize) -> Mat {
    Array2::from_shape_fn((len, len), |(i, j)| if j <= i { 0.0 } else { MASK_NEG })
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), kv_dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), kv_dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, context: Var, mask: Option<&Mat>) -> Var {
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, context);
        let v = self.value.forward(tape, context);
        let mask = mask.map(|m| tape.constant(m.clone()));
        let dim = tape.shape(q).1;
        let out = if self.heads == 1 {
            scaled_dot_attention(tape, q, k, v, mask)
        } else {
            let hd = dim / self.heads;
            let parts: Vec<Var> = (0..self.heads)
                .map(|h| {
                    let qh = tape.slice_cols(q, h * hd, hd);
                    let kh = tape.slice_cols(k, h * hd, hd);
                    let vh = tape.slice_cols(v, h * hd, hd);
                    scaled_dot_attention(tape, qh, kh, vh, mask)
                })
                .collect();
            tape.concat_cols(&parts)
        };
        self.output.forward(tape, out)
    }
}

/// Pre-norm self-attention block: attention and feed-forward, each with a
/// residual connection.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
        }
    }

    /// `mask` is an additive attention mask.
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: Option<&Mat>) -> Var {
        let h = self.norm1.forward(tape, x);
        let h = self.attn.forward(tape, h, h, mask);
        let x = tape.add(x, h);
        let h = self.norm2.forward(tape, x);
        let h = self.ffn.forward(tape, h);
        tape.add(x, h)
    }
}

/// Head count rule for a model width: one head per 64 channels, at least one.
pub fn default_heads(dim: usize) -> usize {
    (dim / 64).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(m[[0, 0]], 0.0);
        assert_eq!(m[[0, 1]], MASK_NEG);
        assert_eq!(m[[2, 1]], 0.0);
    }

    #[test]
    fn multi_head_matches_concat_of_single_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 4, 2, &mut rng);
        let x = crate::params::normal(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let y = mha.forward(&mut tape, xv, xv, None);
        let y = tape.value(y).clone();

        // Manual two-head evaluation.
        let p = |id: ParamId| store.value(id).clone();
        let proj = |l: &Linear| x.dot(&p(l.weight)) + &p(l.bias.unwrap());
        let (q, k, v) = (proj(&mha.query), proj(&mha.key), proj(&mha.value));
        let mut heads = Vec::new();
        for h in 0..2 {
            let sl = ndarray::s![.., h * 2..h * 2 + 2];
            let s = q.slice(sl).dot(&k.slice(sl).t()) / 2f64.sqrt();
            let mut w = s.clone();
            for mut row in w.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|z| (z - m).exp());
                let sum = row.sum();
                row.mapv_inplace(|z| z / sum);
            }
            heads.push(w.dot(&v.slice(sl)));
        }
        let cat = ndarray::concatenate(ndarray::Axis(1), &[heads[0].view(), heads[1].view()]).unwrap();
        let expect = cat.dot(&p(mha.output.weight)) + &p(mha.output.bias.unwrap());
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
