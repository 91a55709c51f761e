//! Brute-force forward oracles and structural properties of the encoder
//! and decoder.

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xsum::params::ParamStore;
use xsum::tape::Tape;
use xsum::tsum::{tsum_loss, TextDecoder, TextDecoderConfig};
use xsum::video_encoder::{TemporalEmbeddingKind, VideoEncoder, VideoEncoderConfig};

type Rows = Vec<Vec<f64>>;

fn weight(store: &ParamStore, name: &str) -> Rows {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).rows().into_iter().map(|r| r.to_vec()).collect()
}

fn linear(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let w = weight(store, &format!("{name}.weight"));
    let b = weight(store, &format!("{name}.bias"));
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| b[0][j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let g = weight(store, &format!("{name}.gain"));
    let s = weight(store, &format!("{name}.shift"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[0][j] + s[0][j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Multi-head attention; `visible(i, j)` says whether query `i` sees key `j`.
fn attention(store: &ParamStore, name: &str, x: &Rows, ctx: &Rows, heads: usize, visible: &dyn Fn(usize, usize) -> bool) -> Rows {
    let q = linear(store, &format!("{name}.query"), x);
    let k = linear(store, &format!("{name}.key"), ctx);
    let v = linear(store, &format!("{name}.value"), ctx);
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        for i in 0..x.len() {
            let scores: Vec<Option<f64>> = (0..ctx.len())
                .map(|j| {
                    visible(i, j).then(|| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let w = (s - max).exp() / z;
                    for c in 0..hd {
                        out[i][h * hd + c] += w * v[j][h * hd + c];
                    }
                }
            }
        }
    }
    linear(store, &format!("{name}.output"), &out)
}

fn oracle_decoder(store: &ParamStore, layers: usize, heads: usize, ctx: &Rows, ctx_valid: &[bool], ids: &[usize]) -> Rows {
    let tok = weight(store, "tsum.token_embedding.table");
    let pos = weight(store, "tsum.position_embedding.table");
    let mut x: Rows = ids.iter().enumerate().map(|(p, &t)| tok[t].iter().zip(&pos[p]).map(|(a, b)| a + b).collect()).collect();
    for l in 0..layers {
        let b = format!("tsum.block{l}");
        let h = layer_norm(store, &format!("{b}.norm1"), &x);
        x = add(&x, &attention(store, &format!("{b}.self_attn"), &h, &h, heads, &|i, j| j <= i));
        let h = layer_norm(store, &format!("{b}.norm2"), &x);
        x = add(&x, &attention(store, &format!("{b}.cross_attn"), &h, ctx, heads, &|_, j| ctx_valid[j]));
        let h = layer_norm(store, &format!("{b}.norm3"), &x);
        let up: Rows = linear(store, &format!("{b}.ffn.up"), &h).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        x = add(&x, &linear(store, &format!("{b}.ffn.down"), &up));
    }
    let x = layer_norm(store, "tsum.final_norm", &x);
    linear(store, "tsum.output", &x)
}

#[test]
fn decoder_matches_scalar_oracle() {
    let cfg = TextDecoderConfig {
        d_txt: 4,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_positions: 8,
    };
    let (vocab, d_ctx) = (7, 4);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let decoder = TextDecoder::new(&mut store, &cfg, vocab, d_ctx, &mut rng).unwrap();
    // Hand-set every weight from a fixed pattern, including gains and shifts.
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (e, v) in store.value_mut(id).iter_mut().enumerate() {
            *v = (((k * 7 + e * 13) % 17) as f64 - 8.0) / 10.0;
        }
    }
    let ctx = Array2::from_shape_fn((3, d_ctx), |(i, j)| ((i * 5 + j * 3) % 7) as f64 / 4.0 - 0.7);
    let ctx_valid = [true, true, false];
    let tokens = [2, 4, 1, 6, 3];

    let mut tape = Tape::new(&store);
    let c = tape.constant(ctx.clone());
    let logits = decoder.forward(&mut tape, c, &ctx_valid, &tokens).unwrap();
    let got = tape.value(logits);

    let rows: Rows = ctx.rows().into_iter().map(|r| r.to_vec()).collect();
    let expected = oracle_decoder(&store, 2, 2, &rows, &ctx_valid, &tokens);
    for (i, row) in expected.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((got[[i, j]] - v).abs() < 1e-10, "logit ({i}, {j}): {} vs {v}", got[[i, j]]);
        }
    }
}

fn encoder_outputs(cfg: &VideoEncoderConfig, zero_embedding: bool, z: &Array2<f64>) -> Array2<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc = VideoEncoder::new(&mut store, cfg, &mut rng).unwrap();
    if zero_embedding {
        let table = enc.embedding.table.expect("learned embedding");
        store.value_mut(table).fill(0.0);
    }
    let mut tape = Tape::new(&store);
    let zv = tape.constant(z.clone());
    let out = enc.forward(&mut tape, zv, &vec![true; z.nrows()]).unwrap();
    tape.value(out).clone()
}

#[test]
fn temporal_encoder_is_permutation_equivariant_only_without_embedding() {
    let cfg = VideoEncoderConfig {
        d_vis: 8,
        temporal_layers: 2,
        heads: 2,
        max_len: 16,
        embedding: TemporalEmbeddingKind::Learned,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [2usize, 5, 9] {
        let z = Array2::from_shape_fn((t, 8), |_| rng.random_range(-1.0..1.0));
        let perm: Vec<usize> = (0..t).rev().collect();
        let zp = z.select(ndarray::Axis(0), &perm);

        let a = encoder_outputs(&cfg, true, &z).select(ndarray::Axis(0), &perm);
        let b = encoder_outputs(&cfg, true, &zp);
        let diff = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-12, "T={t}: equivariance broken by {diff}");

        let a = encoder_outputs(&cfg, false, &z).select(ndarray::Axis(0), &perm);
        let b = encoder_outputs(&cfg, false, &zp);
        let diff = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff > 1e-6, "T={t}: temporal embedding carries no order");
    }
}

proptest! {
    #[test]
    fn raising_true_logit_never_raises_nll(
        logits in proptest::collection::vec(-5.0f64..5.0, 6),
        target in 0usize..6,
        bump in 0.0f64..3.0,
    ) {
        let store = ParamStore::new();
        let nll = |row: &[f64]| {
            let mut tape = Tape::new(&store);
            let l = tape.constant(Array2::from_shape_vec((1, 6), row.to_vec()).unwrap());
            let loss = tsum_loss(&mut tape, l, &[target], &[true]).unwrap();
            tape.scalar(loss)
        };
        let mut raised = logits.clone();
        raised[target] += bump;
        prop_assert!(nll(&raised) <= nll(&logits) + 1e-12);
    }
}
