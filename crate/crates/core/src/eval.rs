//! Runs a model over a split and scores its outputs.

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::{
    bleu4, cider, f1_multi, rank_correlations, rouge_l_with, DualEncoder, EvalReport, RankTarget, RougeVariant,
    VideoScores,
};
use crate::model::{InferenceOptions, Prediction, VtsumModel};
use crate::text::normalize_words;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub inference: InferenceOptions,
    pub rank_target: RankTarget,
    pub rouge: RougeVariant,
}

/// Predictions for every sample, computed in parallel, in input order.
pub fn predict_all(model: &VtsumModel, samples: &[Sample], opts: &InferenceOptions) -> Result<Vec<Prediction>> {
    samples.par_iter().map(|s| model.predict(&s.video, opts)).collect()
}

pub fn evaluate(
    model: &VtsumModel,
    samples: &[Sample],
    opts: &EvalOptions,
    dual: Option<&DualEncoder>,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let predictions = predict_all(model, samples, &opts.inference)?;
    let report = score_predictions(samples, &predictions, opts, dual)?;
    Ok((report, predictions))
}

/// Scores predictions against their samples' references. Caption metrics
/// are skipped when no text was generated; CIDEr also needs two or more
/// videos; the similarity score needs a dual encoder.
pub fn score_predictions(
    samples: &[Sample],
    predictions: &[Prediction],
    opts: &EvalOptions,
    dual: Option<&DualEncoder>,
) -> Result<EvalReport> {
    if samples.len() != predictions.len() {
        return Err(Error::shape(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let with_text = !opts.inference.skip_text;
    let candidates: Vec<Vec<String>> = predictions.iter().map(|p| normalize_words(&p.summary)).collect();
    let references: Vec<Vec<String>> = samples.iter().map(|s| s.refs.words()).collect();
    let cider_scores = if with_text && samples.len() >= 2 {
        let refs: Vec<Vec<Vec<String>>> = references.iter().map(|r| vec![r.clone()]).collect();
        Some(cider(&candidates, &refs)?)
    } else {
        None
    };

    let rows: Result<Vec<VideoScores>> = samples
        .par_iter()
        .zip(predictions.par_iter())
        .enumerate()
        .map(|(i, (sample, pred))| {
            if sample.id() != pred.video_id {
                return Err(Error::invalid(format!(
                    "prediction for {} paired with sample {}",
                    pred.video_id,
                    sample.id()
                )));
            }
            let frames = pred.scores.len();
            let refs = sample.refs.label_matrix(frames)?;
            let (f1_avg, f1_max) = f1_multi(&pred.selection.keep, &refs)?;
            let rc = rank_correlations(&pred.scores, &refs, opts.rank_target)?;
            let (bleu, rouge) = if with_text {
                (
                    Some(bleu4(&candidates[i], &references[i])?),
                    Some(rouge_l_with(&candidates[i], &references[i], opts.rouge)),
                )
            } else {
                (None, None)
            };
            let clip = match (dual, with_text) {
                (Some(d), true) => {
                    let selected = pred.frame_features.select(Axis(0), &pred.selection.indices());
                    Some(d.score(&selected, &pred.summary)?)
                }
                _ => None,
            };
            Ok(VideoScores {
                video_id: pred.video_id.clone(),
                frames,
                f1_avg,
                f1_max,
                kendall_tau: rc.kendall_tau,
                spearman_rho: rc.spearman_rho,
                degenerate: rc.degenerate,
                bleu4: bleu,
                rouge_l: rouge,
                cider: cider_scores.as_ref().map(|c| c[i]),
                vt_clipscore: clip,
            })
        })
        .collect();
    EvalReport::from_rows(rows?)
}
