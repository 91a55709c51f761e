use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kendall's tau-b. `None` when either side is constant.
///
/// Runs in `O(n log n)`: sort by `(x, y)`, count ties, then count
/// discordant pairs as merge-sort inversions of `y`.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    let n = x.len();
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = (n * (n - 1) / 2) as i64;
    let (mut ties_x, mut ties_xy) = (0i64, 0i64);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        ties_x += tie_pairs(j - i);
        // runs of equal y inside the equal-x group
        let mut k = i;
        while k < j {
            let mut l = k + 1;
            while l < j && pairs[l].1 == pairs[k].1 {
                l += 1;
            }
            ties_xy += tie_pairs(l - k);
            k = l;
        }
        i = j;
    }

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut ties_y = 0i64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && ys[j] == ys[i] {
            j += 1;
        }
        ties_y += tie_pairs(j - i);
        i = j;
    }

    let denom_x = n0 - ties_x;
    let denom_y = n0 - ties_y;
    if denom_x == 0 || denom_y == 0 {
        return Ok(None);
    }
    let s = n0 - ties_x - ties_y + ties_xy - 2 * swaps;
    Ok(Some(s as f64 / ((denom_x as f64) * (denom_y as f64)).sqrt()))
}

fn tie_pairs(run: usize) -> i64 {
    (run * (run - 1) / 2) as i64
}

/// Stable merge sort of `v`, returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = v.split_at_mut(mid);
    let mut count = merge_count(left, &mut buf[..mid]) + merge_count(right, &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < left.len() && j < right.len() {
        if right[j] < left[i] {
            buf[k] = right[j];
            count += (left.len() - i) as i64;
            j += 1;
        } else {
            buf[k] = left[i];
            i += 1;
        }
        k += 1;
    }
    while i < left.len() {
        buf[k] = left[i];
        i += 1;
        k += 1;
    }
    while j < right.len() {
        buf[k] = right[j];
        j += 1;
        k += 1;
    }
    v.copy_from_slice(&buf[..n]);
    count
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks. `None` when either
/// side is constant.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("rank inputs of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("rank correlation needs at least two frames"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "rank input".into(),
            detail: "scores must be finite".into(),
        });
    }
    Ok(())
}

/// What the frame scores are ranked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RankTarget {
    /// Each annotator's binary labels, averaged afterwards.
    #[default]
    PerAnnotator,
    /// The mean of the annotators' labels.
    MeanCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    /// Comparisons where a constant vector made a correlation undefined;
    /// they count as 0 in the averages.
    pub degenerate: usize,
}

pub fn rank_correlations(scores: &[f64], refs: &[Vec<bool>], target: RankTarget) -> Result<RankCorrelation> {
    if refs.is_empty() {
        return Err(Error::invalid("no references"));
    }
    let to_f = |r: &Vec<bool>| -> Vec<f64> { r.iter().map(|&b| b as u8 as f64).collect() };
    let targets: Vec<Vec<f64>> = match target {
        RankTarget::PerAnnotator => refs.iter().map(to_f).collect(),
        RankTarget::MeanCurve => {
            let mut mean = vec![0.0; scores.len()];
            for r in refs {
                if r.len() != scores.len() {
                    return Err(Error::shape("reference length differs from score length"));
                }
                for (m, &b) in mean.iter_mut().zip(r) {
                    *m += b as u8 as f64;
                }
            }
            vec![mean.into_iter().map(|m| m / refs.len() as f64).collect()]
        }
    };
    let (mut tau, mut rho, mut degenerate) = (0.0, 0.0, 0usize);
    for t in &targets {
        match kendall_tau_b(scores, t)? {
            Some(v) => tau += v,
            None => degenerate += 1,
        }
        match spearman_rho(scores, t)? {
            Some(v) => rho += v,
            None => degenerate += 1,
        }
    }
    let n = targets.len() as f64;
    Ok(RankCorrelation {
        kendall_tau: tau / n,
        spearman_rho: rho / n,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tau_pairs(x: &[f64], y: &[f64]) -> Option<f64> {
        let n = x.len();
        let (mut c, mut d, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let a = (x[i] - x[j]).signum() * ((x[i] != x[j]) as u8 as f64);
                let b = (y[i] - y[j]).signum() * ((y[i] != y[j]) as u8 as f64);
                if a == 0.0 {
                    tx += 1.0;
                }
                if b == 0.0 {
                    ty += 1.0;
                }
                if a * b > 0.0 {
                    c += 1.0;
                } else if a * b < 0.0 {
                    d += 1.0;
                }
            }
        }
        let n0 = (n * (n - 1) / 2) as f64;
        let den = ((n0 - tx) * (n0 - ty)).sqrt();
        (den > 0.0).then(|| (c - d) / den)
    }

    #[test]
    fn examples() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let r = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau_b(&p, &r).unwrap(), Some(1.0));
        assert!((spearman_rho(&p, &r).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau_b(&p, &rev).unwrap(), Some(-1.0));
        assert!((spearman_rho(&p, &rev).unwrap().unwrap() + 1.0).abs() < 1e-12);
        let t = kendall_tau_b(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap().unwrap();
        assert!((t + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(kendall_tau_b(&[1.0, 1.0], &[0.0, 1.0]).unwrap(), None);
        assert_eq!(spearman_rho(&[1.0, 2.0], &[1.0, 1.0]).unwrap(), None);
        assert!(kendall_tau_b(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn degenerate_counted() {
        let refs = vec![vec![true, false, true], vec![false, false, false]];
        let rc = rank_correlations(&[0.9, 0.1, 0.8], &refs, RankTarget::PerAnnotator).unwrap();
        assert_eq!(rc.degenerate, 2);
        let single = kendall_tau_b(&[0.9, 0.1, 0.8], &[1.0, 0.0, 1.0]).unwrap().unwrap();
        assert!((rc.kendall_tau - single / 2.0).abs() < 1e-12);
        let mc = rank_correlations(&[0.9, 0.1, 0.8], &refs, RankTarget::MeanCurve).unwrap();
        assert_eq!(mc.degenerate, 0);
    }

    proptest! {
        #[test]
        fn tau_matches_pair_enumeration(
            v in prop::collection::vec((0u8..5, 0u8..3), 2..50)
        ) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            let fast = kendall_tau_b(&x, &y).unwrap();
            let slow = tau_pairs(&x, &y);
            match (fast, slow) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn bounded_and_monotone_invariant(
            v in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let x: Vec<f64> = v.iter().map(|p| p.0).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as u8 as f64).collect();
            let tx: Vec<f64> = x.iter().map(|a| (3.0 * a).exp() - 7.0).collect();
            if let Some(t) = kendall_tau_b(&x, &y).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&t));
                prop_assert!((t - kendall_tau_b(&tx, &y).unwrap().unwrap()).abs() < 1e-12);
            }
            if let Some(r) = spearman_rho(&x, &y).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((r - spearman_rho(&tx, &y).unwrap().unwrap()).abs() < 1e-12);
            }
        }
    }
}
