//! Caption overlap metrics over token sequences.
//!
//! All functions are generic over the token type so they work on words or
//! ids alike.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 4;
pub const CIDER_ORDER: usize = 4;
/// Width of the length penalty in CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 against a single reference.
///
/// Precisions are clipped by reference counts. A zero match count at orders
/// 2 to 4 is smoothed to `1 / (candidate n-grams + 1)`; a zero unigram match
/// gives 0. The brevity penalty is `exp(1 - r / c)` when the candidate is not
/// longer than the reference.
pub fn bleu4<T: Ord>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("BLEU needs a non-empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_ORDER {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let matched: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let total = candidate.len().saturating_sub(n - 1);
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / BLEU_ORDER as f64).exp())
}

/// Length of the longest common subsequence.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RougeVariant {
    /// F-measure weighting recall by `beta`.
    FMeasure { beta: f64 },
    Recall,
}

impl Default for RougeVariant {
    fn default() -> Self {
        RougeVariant::FMeasure { beta: ROUGE_BETA }
    }
}

/// ROUGE-L F-measure with `beta = 1.2`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_with(candidate, reference, RougeVariant::default())
}

pub fn rouge_l_with<T: PartialEq>(candidate: &[T], reference: &[T], variant: RougeVariant) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / reference.len() as f64;
    let precision = lcs / candidate.len() as f64;
    match variant {
        RougeVariant::Recall => recall,
        RougeVariant::FMeasure { beta } => {
            let b2 = beta * beta;
            (1.0 + b2) * precision * recall / (recall + b2 * precision)
        }
    }
}

/// TF-IDF vector of one sentence at order `n`, with its norm.
fn tfidf<'a, T: Ord>(
    tokens: &'a [T],
    n: usize,
    df: &BTreeMap<&[T], usize>,
    log_n: f64,
) -> (BTreeMap<&'a [T], f64>, f64) {
    let mut vec = BTreeMap::new();
    let mut norm = 0.0;
    for (g, tf) in ngram_counts(tokens, n) {
        let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
        let w = tf as f64 * (log_n - d.ln());
        norm += w * w;
        vec.insert(g, w);
    }
    (vec, norm.sqrt())
}

/// CIDEr-D score of every candidate against its references, ×10.
///
/// Document frequencies come from the references: an n-gram's frequency is
/// the number of videos whose references contain it.
pub fn cider<T: Ord>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::shape(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.len() < 2 {
        return Err(Error::invalid("CIDEr needs a corpus of at least two videos"));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::invalid("every video needs at least one reference"));
    }
    let log_n = (candidates.len() as f64).ln();
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=CIDER_ORDER {
        let mut df: BTreeMap<&[T], usize> = BTreeMap::new();
        for refs in references {
            let grams: BTreeSet<&[T]> = refs
                .iter()
                .flat_map(|r| if r.len() >= n { r.windows(n).collect() } else { Vec::new() })
                .collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            let (cv, cn) = tfidf(cand, n, &df, log_n);
            let mut sim = 0.0;
            for r in refs {
                let (rv, rn) = tfidf(r, n, &df, log_n);
                let delta = cand.len() as f64 - r.len() as f64;
                let mut dot = 0.0;
                for (g, w) in &cv {
                    if let Some(rw) = rv.get(g) {
                        dot += w.min(*rw) * rw;
                    }
                }
                if cn != 0.0 && rn != 0.0 {
                    dot /= cn * rn;
                }
                sim += dot * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
            scores[i] += sim / refs.len() as f64;
        }
    }
    Ok(scores.into_iter().map(|s| s / CIDER_ORDER as f64 * 10.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu4(&w("a b c d e"), &w("a b c d e")).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&w("x y z"), &w("a b c")).unwrap(), 0.0);
        let v = bleu4(&w("a b c d d"), &w("a b c d")).unwrap();
        assert!((v - 0.2f64.powf(0.25)).abs() < 1e-12);
        assert_eq!(bleu4(&w(""), &w("a")).unwrap(), 0.0);
        assert!(bleu4(&w("a"), &w("")).is_err());
        // short candidate: brevity penalty and smoothing
        let v = bleu4(&w("a b"), &w("a b c d")).unwrap();
        let expect = (1.0f64 - 2.0).exp() * (1.0f64 * 1.0 * 1.0 * 1.0).powf(0.25);
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(lcs_length(&w("a b c"), &w("a c")), 2);
        assert!((rouge_l(&w("a b c"), &w("a b c")) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&w("a b"), &w("c d")), 0.0);
        let r = rouge_l_with(&w("a c"), &w("a b c"), RougeVariant::Recall);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cider_examples() {
        let cands = vec![w("a man runs fast"), w("x y z")];
        let refs = vec![vec![w("a man runs fast")], vec![w("dogs bark at night")]];
        let s = cider(&cands, &refs).unwrap();
        assert!((s[0] - 10.0).abs() < 1e-9);
        assert_eq!(s[1], 0.0);
        assert!(cider(&cands[..1], &refs[..1]).is_err());
    }

    #[test]
    fn cider_corpus_duplication_invariant() {
        let refs = vec![
            vec![w("a man throws a ball in the park")],
            vec![w("a dog chases the ball")],
            vec![w("the man walks in the park")],
        ];
        let cands = vec![w("a dog chases the ball"), w("the man walks in the park"), w("a man throws a ball")];
        let once = cider(&cands, &refs).unwrap();
        let mut c2 = cands.clone();
        c2.extend(cands.clone());
        let mut r2 = refs.clone();
        r2.extend(refs.clone());
        let twice = cider(&c2, &r2).unwrap();
        for i in 0..3 {
            assert!((once[i] - twice[i]).abs() < 1e-12);
            assert!((once[i] - twice[i + 3]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn relabeling_invariance(
            cand in prop::collection::vec(0u8..6, 0..20),
            reference in prop::collection::vec(0u8..6, 1..20),
            other in prop::collection::vec(0u8..6, 1..20),
            shift in 1u8..50,
        ) {
            let map = |v: &Vec<u8>| -> Vec<u8> { v.iter().map(|t| t.wrapping_mul(7).wrapping_add(shift)).collect() };
            let (c2, r2, o2) = (map(&cand), map(&reference), map(&other));
            prop_assert!((bleu4(&cand, &reference).unwrap() - bleu4(&c2, &r2).unwrap()).abs() < 1e-12);
            prop_assert!((rouge_l(&cand, &reference) - rouge_l(&c2, &r2)).abs() < 1e-12);
            let a = cider(&[cand.clone(), other.clone()], &[vec![reference.clone()], vec![other.clone()]]).unwrap();
            let b = cider(&[c2, o2.clone()], &[vec![r2], vec![o2]]).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-12);
        }

        #[test]
        fn bounded(cand in prop::collection::vec(0u8..5, 0..20), reference in prop::collection::vec(0u8..5, 1..20)) {
            let b = bleu4(&cand, &reference).unwrap();
            let r = rouge_l(&cand, &reference);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        }
    }
}
