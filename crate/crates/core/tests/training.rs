use ndarray::Array2;

use xsum::dataset::Sample;
use xsum::eval::{evaluate, EvalOptions};
use xsum::model::{InferenceOptions, ModelConfig, VtsumModel};
use xsum::synth::{generate, SynthConfig};
use xsum::text::Vocabulary;
use xsum::train::{FitOptions, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG};
use xsum::vsum::VSUM_PREFIX;

fn corpus(videos: usize, seed: u64) -> Vec<Sample> {
    generate(&SynthConfig {
        videos,
        seed,
        min_frames: 12,
        max_frames: 24,
        ..Default::default()
    })
    .samples
}

fn vocab(samples: &[Sample]) -> Vocabulary {
    Vocabulary::build(samples.iter().map(|s| s.refs.text_summary.as_str()), 1)
}

fn trainer(samples: &[Sample], cfg: TrainConfig) -> Trainer {
    let mut mc = ModelConfig::default();
    mc.max_gen_len = 12;
    Trainer::new(VtsumModel::new(&mc, vocab(samples)).unwrap(), cfg).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 1e-3,
        epochs,
        batch_size: 3,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_losses() {
    let data = corpus(6, 0);
    let run = || {
        let mut t = trainer(&data, cfg(10));
        let prepared = t.prepare(&data).unwrap();
        let batch: Vec<_> = prepared.iter().take(3).collect();
        (0..3).map(|_| t.train_step(&batch, 1e-3).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a[2].total < a[0].total);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = corpus(7, 1);
    let (train, val) = data.split_at(5);
    let dir = tempfile::tempdir().unwrap();

    let mut full = trainer(train, cfg(4));
    let uninterrupted = full.fit(train, val, &FitOptions::default()).unwrap();

    let mut first = trainer(train, cfg(4));
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(2),
        ..Default::default()
    };
    let head = first.fit(train, val, &opts).unwrap();
    assert_eq!(head.len(), 2);
    drop(first);
    let mut resumed = Trainer::resume(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(resumed.epoch, 2);
    let tail = resumed
        .fit(train, val, &FitOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        })
        .unwrap();
    let stitched: Vec<_> = head.into_iter().chain(tail).collect();
    assert_eq!(stitched, uninterrupted);
    assert_eq!(resumed.model.store, full.model.store);
    assert_eq!(resumed.optimizer, full.optimizer);

    let log = std::fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(dir.path().join(BEST_CHECKPOINT).exists());
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let data = corpus(3, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(&data, cfg(0));
    let initial = t.model.store.clone();
    let records = t
        .fit(&data, &[], &FitOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        })
        .unwrap();
    assert!(records.is_empty());
    let (model, header) = VtsumModel::from_checkpoint(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(model.store, initial);
    assert_eq!(header.epoch, 0);
    assert_eq!(header.step, 0);
}

#[test]
fn text_only_training_leaves_video_head_untouched() {
    let data = corpus(4, 3);
    let mut t = trainer(&data, TrainConfig {
        lambda_v: 0.0,
        ..cfg(3)
    });
    let before = t.model.store.clone();
    t.fit(&data, &[], &FitOptions::default()).unwrap();
    let head: Vec<_> = t.model.store.ids_with_prefix(VSUM_PREFIX).collect();
    assert!(!head.is_empty());
    for id in head {
        assert_eq!(t.model.store.value(id), before.value(id), "{}", t.model.store.get(id).name);
    }
    assert_ne!(t.model.store, before);
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let data = corpus(3, 4);
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(&data, cfg(2));
    t.fit(&data, &[], &FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    })
    .unwrap();
    let (model, _) = VtsumModel::from_checkpoint(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    let opts = InferenceOptions::default();
    for s in &data {
        let a = t.model.predict(&s.video, &opts).unwrap();
        let b = model.predict(&s.video, &opts).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.scores), bits(&b.scores));
        assert_eq!(a.tokens, b.tokens);
        let fa: &Array2<f64> = &a.frame_features;
        assert_eq!(fa, &b.frame_features);
    }
}

#[test]
fn toy_training_beats_untrained_model() {
    let data = corpus(16, 5);
    let (train, val) = data.split_at(8);
    let mut t = trainer(train, TrainConfig {
        epochs: 200,
        batch_size: 8,
        base_lr: 3e-3,
        ..Default::default()
    });
    let opts = EvalOptions::default();
    let (before, _) = evaluate(&t.model, val, &opts, None).unwrap();
    t.fit(train, &[], &FitOptions::default()).unwrap();
    let (after, _) = evaluate(&t.model, val, &opts, None).unwrap();
    assert!(after.f1_avg > before.f1_avg, "F1 {} -> {}", before.f1_avg, after.f1_avg);
    assert!(after.cider.unwrap() > before.cider.unwrap(), "CIDEr {:?} -> {:?}", before.cider, after.cider);
}

#[test]
fn non_finite_features_abort_with_context() {
    let mut data = corpus(2, 6);
    if let xsum::dataset::FrameData::Features(f) = &mut data[0].video.frames {
        f[[0, 0]] = f64::NAN;
    }
    let mut t = trainer(&data, cfg(1));
    let err = t.fit(&data, &[], &FitOptions::default()).unwrap_err();
    assert!(matches!(err, xsum::Error::NonFinite { .. }), "{err}");
}
