//! Joint training of the shared encoder and both summary heads.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{majority_labels, FrameData, Sample, VideoRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::metrics::EvalReport;
use crate::model::{config_hash, ModelConfig, VtsumModel};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::tape::{Mat, Tape};
use crate::text::{Vocabulary, UNK};
use crate::tsum::{tsum_loss, TextTarget};
use crate::video_encoder::FrameEncoder;
use crate::vsum::vsum_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the video-summary loss.
    pub lambda_v: f64,
    /// Weight of the text-summary loss.
    pub lambda_t: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed for batch order.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_v: 15.0,
            lambda_t: 1.0,
            base_lr: 2e-5,
            weight_decay: 0.05,
            epochs: 56,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_v >= 0.0 && self.lambda_t >= 0.0) || !self.lambda_v.is_finite() || !self.lambda_t.is_finite() {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.lambda_v == 0.0 && self.lambda_t == 0.0 {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("optimizer betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        train_len.div_ceil(self.batch_size) as u64
    }
}

/// `λ_v · L_v + λ_t · L_t`.
pub fn total_loss(video_loss: f64, text_loss: f64, cfg: &TrainConfig) -> Result<f64> {
    if !video_loss.is_finite() || !text_loss.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss".into(),
            detail: format!("video loss {video_loss}, text loss {text_loss}"),
        });
    }
    Ok(cfg.lambda_v * video_loss + cfg.lambda_t * text_loss)
}

/// Loss values of one batch. `video` and `text` are per-video means; `text`
/// is a summed NLL per caption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Losses {
    pub video: f64,
    pub text: f64,
    pub total: f64,
}

enum Frames {
    /// Frozen frame-encoder output, computed once.
    Cached(Array2<f64>),
    /// Raw frames through a trainable frame encoder.
    Live(VideoRecord),
}

/// A training sample with its supervision laid out for the model.
pub struct Prepared {
    pub video_id: String,
    frames: Frames,
    /// Majority-vote frame labels, truncated to the encoder's length limit.
    pub labels: Vec<bool>,
    pub target: TextTarget,
}

/// Token ids of a caption's normalised words.
pub fn caption_ids(vocab: &Vocabulary, sample: &Sample) -> Vec<usize> {
    sample.refs.words().iter().map(|w| vocab.id(w).unwrap_or(UNK)).collect()
}

/// Scalar metrics of one evaluation, without the per-video rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub f1_avg: f64,
    pub f1_max: f64,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
}

impl From<&EvalReport> for MetricSnapshot {
    fn from(r: &EvalReport) -> Self {
        Self {
            f1_avg: r.f1_avg,
            f1_max: r.f1_max,
            kendall_tau: r.kendall_tau,
            spearman_rho: r.spearman_rho,
            bleu4: r.bleu4,
            rouge_l: r.rouge_l,
            cider: r.cider,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train: Losses,
    pub val: Option<Losses>,
    pub val_metrics: Option<MetricSnapshot>,
}

/// JSON header stored in model checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub config_hash: String,
    pub metrics: Option<EpochRecord>,
    pub best_val: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub version: String,
}

/// Hash identifying a model and training configuration pair.
pub fn run_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    config_hash(&(model, train))
}

impl VtsumModel {
    /// Rebuilds a model from a checkpoint file, parameters bit-exact.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let raw = checkpoint::load::<CheckpointHeader>(path)?;
        let mut model = VtsumModel::new(&raw.header.model, raw.header.vocab.clone())?;
        model.store.load_values(&raw.params)?;
        Ok((model, raw.header))
    }
}

/// Where and how `fit` reports progress.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for `last.ckpt`, `best.ckpt` and `metrics.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Validation metrics after every epoch; losses are always computed.
    pub eval: Option<EvalOptions>,
    /// Stop once this many epochs are complete.
    pub stop_after: Option<usize>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

pub struct Trainer {
    pub model: VtsumModel,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
    /// Lowest validation loss seen.
    pub best_val: Option<f64>,
}

impl Trainer {
    pub fn new(model: VtsumModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.adamw(), &model.store);
        Ok(Self {
            model,
            config,
            optimizer,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            best_val: None,
        })
    }

    /// Restores model, optimizer state and progress from a checkpoint.
    pub fn resume(path: &Path) -> Result<Self> {
        let raw = checkpoint::load::<CheckpointHeader>(path)?;
        let h = raw.header;
        h.train.validate()?;
        let mut model = VtsumModel::new(&h.model, h.vocab.clone())?;
        model.store.load_values(&raw.params)?;
        if run_hash(&model.config, &h.train) != h.config_hash {
            return Err(Error::Checkpoint("configuration hash does not match the stored configuration".into()));
        }
        let optimizer = checkpoint::restore_optimizer(h.train.adamw(), &model.store, &raw.moments)?;
        Ok(Self {
            model,
            config: h.train,
            optimizer,
            epoch: h.epoch,
            step: h.step,
            history: h.history,
            best_val: h.best_val,
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            model: self.model.config.clone(),
            train: self.config.clone(),
            vocab: self.model.vocab.clone(),
            epoch: self.epoch,
            step: self.step,
            config_hash: run_hash(&self.model.config, &self.config),
            metrics: self.history.last().cloned(),
            best_val: self.best_val,
            history: self.history.clone(),
            version: crate::VERSION.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.model.store, Some(&self.optimizer))
    }

    pub fn prepare(&self, samples: &[Sample]) -> Result<Vec<Prepared>> {
        let model = &self.model;
        let frozen = model.encoder.frames.is_frozen(&model.store);
        samples
            .par_iter()
            .map(|s| {
                let video = &s.video;
                let frames = match (&video.frames, frozen) {
                    (FrameData::Raw(_), false) => Frames::Live(video.clone()),
                    _ => {
                        let f = model.encoder.encode_frames(&model.store, video)?;
                        let keep = f.nrows().min(model.config.video.max_len);
                        Frames::Cached(f.slice(ndarray::s![..keep, ..]).to_owned())
                    }
                };
                let rows = video.frames.len().unwrap_or(0);
                if rows != video.frame_count {
                    return Err(Error::shape(format!(
                        "video {} has {} frames loaded but frame_count {}",
                        video.video_id, rows, video.frame_count
                    )));
                }
                let mut labels = majority_labels(&s.refs.label_matrix(video.frame_count)?);
                labels.truncate(model.config.video.max_len);
                let words = caption_ids(&model.vocab, s);
                let target = TextTarget::new(&model.prompt_ids, &words, model.config.max_gen_len)?;
                Ok(Prepared {
                    video_id: video.video_id.clone(),
                    frames,
                    labels,
                    target,
                })
            })
            .collect()
    }

    /// Losses of one sample, and the gradient of `weight · (λ_v L_v + λ_t L_t)`
    /// when `weight` is given. A branch whose weight is zero is evaluated
    /// for reporting but contributes no gradient.
    fn sample_pass(&self, sample: &Prepared, weight: Option<f64>) -> Result<(f64, f64, Vec<Option<Mat>>)> {
        let model = &self.model;
        let mut tape = Tape::new(&model.store);
        let z = match &sample.frames {
            Frames::Cached(f) => tape.constant(f.clone()),
            Frames::Live(video) => model.frame_features(&mut tape, video)?,
        };
        let valid = vec![true; tape.shape(z).0];
        let enc = model.forward_features(&mut tape, z, &valid)?;
        let lv = vsum_loss(&mut tape, enc.scores, &sample.labels, &valid)?;
        let logits = model.tsum.forward(&mut tape, enc.features, &valid, &sample.target.input)?;
        let lt = tsum_loss(&mut tape, logits, &sample.target.targets, &sample.target.supervised)?;
        let (v, t) = (tape.scalar(lv), tape.scalar(lt));
        let mut dense = vec![None; model.store.len()];
        if let Some(w) = weight {
            total_loss(v, t, &self.config).map_err(|e| with_video(e, &sample.video_id))?;
            let loss = match (self.config.lambda_v > 0.0, self.config.lambda_t > 0.0) {
                (true, true) => {
                    let a = tape.scale(lv, w * self.config.lambda_v);
                    let b = tape.scale(lt, w * self.config.lambda_t);
                    tape.add(a, b)
                }
                (true, false) => tape.scale(lv, w * self.config.lambda_v),
                (false, _) => tape.scale(lt, w * self.config.lambda_t),
            };
            for (id, g) in tape.backward(loss).params() {
                dense[id.index()] = Some(g.clone());
            }
        }
        Ok((v, t, dense))
    }

    /// Mean losses over `batch` without updating anything.
    pub fn losses(&self, batch: &[&Prepared]) -> Result<Losses> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let parts: Vec<(f64, f64, _)> = batch.par_iter().map(|s| self.sample_pass(s, None)).collect::<Result<_>>()?;
        self.reduce_losses(&parts)
    }

    fn reduce_losses(&self, parts: &[(f64, f64, Vec<Option<Mat>>)]) -> Result<Losses> {
        let n = parts.len() as f64;
        let video = parts.iter().map(|p| p.0).sum::<f64>() / n;
        let text = parts.iter().map(|p| p.1).sum::<f64>() / n;
        let total = total_loss(video, text, &self.config)?;
        Ok(Losses { video, text, total })
    }

    /// One optimizer step on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&Prepared], lr: f64) -> Result<Losses> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let w = 1.0 / batch.len() as f64;
        let parts: Vec<(f64, f64, Vec<Option<Mat>>)> = batch
            .par_iter()
            .map(|s| self.sample_pass(s, Some(w)))
            .collect::<Result<_>>()?;
        let losses = self.reduce_losses(&parts)?;
        let mut grads: Vec<Option<Mat>> = vec![None; self.model.store.len()];
        for (_, _, g) in parts {
            for (acc, g) in grads.iter_mut().zip(g) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => *a += &g,
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        self.optimizer.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(losses)
    }

    /// Batch order of epoch `epoch` (0-based); depends only on the seed.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Runs epoch `self.epoch` and returns its mean batch losses and last lr.
    pub fn run_epoch(&mut self, train: &[Prepared]) -> Result<(Losses, f64)> {
        if train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let total_steps = self.config.epochs as u64 * self.config.steps_per_epoch(train.len());
        let order = self.epoch_order(self.epoch, train.len());
        let mut sum = Losses::default();
        let mut batches = 0.0;
        let mut lr = self.config.base_lr;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            lr = lr_at(self.step, total_steps, self.config.base_lr);
            let l = self.train_step(&batch, lr)?;
            sum.video += l.video;
            sum.text += l.text;
            sum.total += l.total;
            batches += 1.0;
        }
        self.epoch += 1;
        Ok((
            Losses {
                video: sum.video / batches,
                text: sum.text / batches,
                total: sum.total / batches,
            },
            lr,
        ))
    }

    /// Trains until `config.epochs` (or `opts.stop_after`) epochs are done,
    /// continuing from the current epoch. With `epochs == 0` only the
    /// initial checkpoint is written.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], opts: &FitOptions) -> Result<Vec<EpochRecord>> {
        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let train_set = self.prepare(train)?;
        let val_set = self.prepare(val)?;
        let until = opts.stop_after.map_or(self.config.epochs, |s| s.min(self.config.epochs));
        if self.epoch >= until {
            if let Some(dir) = &opts.out_dir {
                self.save(&dir.join(LAST_CHECKPOINT))?;
            }
            return Ok(Vec::new());
        }
        let mut records = Vec::new();
        while self.epoch < until {
            let (train_losses, lr) = self.run_epoch(&train_set)?;
            let val_losses = if val_set.is_empty() {
                None
            } else {
                Some(self.losses(&val_set.iter().collect::<Vec<_>>())?)
            };
            let val_metrics = match (&opts.eval, val.is_empty()) {
                (Some(e), false) => Some(MetricSnapshot::from(&evaluate(&self.model, val, e, None)?.0)),
                _ => None,
            };
            let record = EpochRecord {
                epoch: self.epoch,
                step: self.step,
                lr,
                train: train_losses,
                val: val_losses,
                val_metrics,
            };
            log::info!(
                "epoch {} step {} train {:.4} val {}",
                record.epoch,
                record.step,
                train_losses.total,
                val_losses.map_or("-".into(), |v| format!("{:.4}", v.total))
            );
            self.history.push(record.clone());
            let improved = match (val_losses, self.best_val) {
                (Some(v), Some(best)) => v.total < best,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                self.best_val = val_losses.map(|v| v.total);
            }
            if let Some(dir) = &opts.out_dir {
                append_jsonl(&dir.join(METRICS_LOG), &record)?;
                self.save(&dir.join(LAST_CHECKPOINT))?;
                if improved {
                    self.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
            records.push(record);
        }
        Ok(records)
    }
}

fn with_video(e: Error, video_id: &str) -> Error {
    match e {
        Error::NonFinite { what, detail } => Error::NonFinite {
            what,
            detail: format!("video {video_id}: {detail}"),
        },
        other => other,
    }
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).expect("record serialises");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
