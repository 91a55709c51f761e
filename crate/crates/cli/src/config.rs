//! Run configuration: a TOML file with one table per pipeline stage, then
//! command-line overrides on top.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xsum::dataset::{LoadOptions, SplitSizes, ANNOTATORS, MAX_CORPUS_FRAMES, MIN_FRAMES, RATIO_THRESHOLD};
use xsum::eval::EvalOptions;
use xsum::metrics::ContrastiveConfig;
use xsum::model::ModelConfig;
use xsum::train::TrainConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub strict_overlap: bool,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Largest covered fraction accepted per reference at load time.
    pub max_coverage: f64,
    /// Records whose largest reference ratio exceeds this are dropped by `split`.
    pub ratio_threshold: f64,
    pub annotators: usize,
    /// Words seen fewer times in the training texts map to `[UNK]`.
    pub vocab_min_count: usize,
    /// Relative split sizes used by `split` when `--sizes` is absent.
    pub split_weights: [usize; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            strict_overlap: false,
            min_frames: MIN_FRAMES,
            max_frames: MAX_CORPUS_FRAMES,
            max_coverage: RATIO_THRESHOLD,
            ratio_threshold: RATIO_THRESHOLD,
            annotators: ANNOTATORS,
            vocab_min_count: 1,
            split_weights: [8000, 2001, 4000],
        }
    }
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            strict_overlap: self.strict_overlap,
            min_frames: self.min_frames,
            max_frames: Some(self.max_frames),
            max_coverage: Some(self.max_coverage),
            annotators: self.annotators,
            default_split: None,
            features: None,
        }
    }

    /// Split sizes for `n` records in proportion to `split_weights`; the
    /// test split absorbs rounding.
    pub fn split_sizes(&self, n: usize) -> SplitSizes {
        let [a, b, c] = self.split_weights;
        let total = (a + b + c).max(1) as f64;
        let train = (n as f64 * a as f64 / total).round() as usize;
        let val = ((n as f64 * b as f64 / total).round() as usize).min(n - train);
        SplitSizes::new(train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub contrastive: ContrastiveConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.contrastive.seed = seed;
        self.contrastive.model.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_cover_everything() {
        let d = DataConfig::default();
        for n in [0, 1, 2, 3, 10, 14001, 997] {
            let s = d.split_sizes(n);
            assert_eq!(s.total(), n);
        }
        let s = d.split_sizes(14001);
        assert_eq!((s.train, s.val, s.test), (8000, 2001, 4000));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepochs = 3\n").is_ok());
        assert!(toml::from_str::<RunConfig>("[trian]\nepochs = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[data]\nvocab_min = 3\n").is_err());
    }

    #[test]
    fn nested_tables_parse() {
        let cfg: RunConfig = toml::from_str(
            "[model.video]\nd_vis = 16\n[model.vsum]\nwindow = 3\n[eval.inference]\ndecode = \"beam:3\"\n",
        )
        .unwrap();
        assert_eq!(cfg.model.video.d_vis, 16);
        assert_eq!(cfg.model.vsum.window, 3);
        assert_eq!(cfg.eval.inference.decode, xsum::tsum::DecodeMode::Beam(3));
    }
}
