use crate::error::{Error, Result};

/// Frame-level F1 between a predicted and a reference keep-vector.
///
/// Both empty scores 1; otherwise a zero precision and recall scores 0.
pub fn f1_frames(pred: &[bool], reference: &[bool]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::shape(format!(
            "prediction of {} frames against a reference of {}",
            pred.len(),
            reference.len()
        )));
    }
    let mut overlap = 0usize;
    let mut n_pred = 0usize;
    let mut n_ref = 0usize;
    for (&p, &r) in pred.iter().zip(reference) {
        n_pred += p as usize;
        n_ref += r as usize;
        overlap += (p && r) as usize;
    }
    if n_pred == 0 && n_ref == 0 {
        return Ok(1.0);
    }
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / n_pred as f64;
    let recall = overlap as f64 / n_ref as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean and maximum F1 of `pred` against every reference.
pub fn f1_multi(pred: &[bool], refs: &[Vec<bool>]) -> Result<(f64, f64)> {
    if refs.is_empty() {
        return Err(Error::invalid("no references"));
    }
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for r in refs {
        let f = f1_frames(pred, r)?;
        sum += f;
        max = max.max(f);
    }
    Ok((sum / refs.len() as f64, max))
}

/// Human agreement: each reference scored against the others with
/// [`f1_multi`], then averaged over references.
pub fn leave_one_out(refs: &[Vec<bool>]) -> Result<(f64, f64)> {
    if refs.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two references"));
    }
    let mut avg = 0.0;
    let mut max = 0.0;
    for (i, held) in refs.iter().enumerate() {
        let rest: Vec<Vec<bool>> = refs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, r)| r.clone())
            .collect();
        let (a, m) = f1_multi(held, &rest)?;
        avg += a;
        max += m;
    }
    let n = refs.len() as f64;
    Ok((avg / n, max / n))
}
