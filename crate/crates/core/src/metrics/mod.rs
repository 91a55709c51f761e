//! Evaluation metrics for video summaries, text summaries and their
//! agreement.

pub mod caption;
pub mod clipscore;
pub mod f1;
pub mod rank;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use caption::{bleu4, cider, lcs_length, rouge_l, rouge_l_with, RougeVariant};
pub use clipscore::{
    DualEncoderHeader,
    finetune_dual_encoder, similarity_probe, vt_clipscore, ClipPair, ContrastiveConfig, DualEncoder,
    DualEncoderConfig, SimilarityProbe,
};
pub use f1::{f1_frames, f1_multi, leave_one_out};
pub use rank::{kendall_tau_b, rank_correlations, spearman_rho, RankCorrelation, RankTarget};

use crate::error::{Error, Result};

/// Scores of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub frames: usize,
    pub f1_avg: f64,
    pub f1_max: f64,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    pub degenerate: usize,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub vt_clipscore: Option<f64>,
}

/// Corpus-level report. F1, caption scores and the similarity score are
/// percentages; rank correlations stay in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub f1_avg: f64,
    pub f1_max: f64,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    pub degenerate_rank_cases: usize,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub vt_clipscore: Option<f64>,
    pub per_video: Vec<VideoScores>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn mean_opt<'a>(rows: &'a [VideoScores], f: impl Fn(&'a VideoScores) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()) * 100.0)
}

impl EvalReport {
    /// Averages per-video rows into a report.
    pub fn from_rows(per_video: Vec<VideoScores>) -> Result<Self> {
        if per_video.is_empty() {
            return Err(Error::invalid("evaluation over zero videos"));
        }
        let report = Self {
            videos: per_video.len(),
            f1_avg: mean(per_video.iter().map(|r| r.f1_avg)) * 100.0,
            f1_max: mean(per_video.iter().map(|r| r.f1_max)) * 100.0,
            kendall_tau: mean(per_video.iter().map(|r| r.kendall_tau)),
            spearman_rho: mean(per_video.iter().map(|r| r.spearman_rho)),
            degenerate_rank_cases: per_video.iter().map(|r| r.degenerate).sum(),
            bleu4: mean_opt(&per_video, |r| r.bleu4),
            rouge_l: mean_opt(&per_video, |r| r.rouge_l),
            cider: mean_opt(&per_video, |r| r.cider),
            vt_clipscore: mean_opt(&per_video, |r| r.vt_clipscore),
            per_video,
        };
        let fields = [
            report.f1_avg,
            report.f1_max,
            report.kendall_tau,
            report.spearman_rho,
        ];
        let optional = [report.bleu4, report.rouge_l, report.cider, report.vt_clipscore];
        if fields.iter().chain(optional.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "evaluation report".into(),
                detail: "a metric average is not finite".into(),
            });
        }
        Ok(report)
    }

    /// Per-video rows as CSV. Missing values are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let io = |e: csv::Error| Error::Other(format!("writing {}: {e}", path.display()));
        w.write_record([
            "video_id",
            "frames",
            "f1_avg",
            "f1_max",
            "kendall_tau",
            "spearman_rho",
            "degenerate",
            "bleu4",
            "rouge_l",
            "cider",
            "vt_clipscore",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.per_video {
            w.write_record([
                r.video_id.clone(),
                r.frames.to_string(),
                r.f1_avg.to_string(),
                r.f1_max.to_string(),
                r.kendall_tau.to_string(),
                r.spearman_rho.to_string(),
                r.degenerate.to_string(),
                opt(r.bleu4),
                opt(r.rouge_l),
                opt(r.cider),
                opt(r.vt_clipscore),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let body = serde_json::to_string_pretty(self).expect("report serialises");
        writeln!(f, "{body}").map_err(|e| Error::io(path, e))
    }
}
