use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use ndarray::Axis;
use serde::Serialize;
use xsum::dataset::{
    compute_stats, filter_by_ratio, labels_to_spans, length_deciles, load_corpus, majority_labels, split_corpus,
    write_corpus, FeatureStore, FrameData, LoadOptions, Sample, Split, SplitSizes,
};
use xsum::eval::{evaluate as run_evaluation, predict_all};
use xsum::metrics::{finetune_dual_encoder, leave_one_out, similarity_probe, ClipPair, DualEncoder, RankTarget};
use xsum::model::{config_hash, InferenceOptions, VtsumModel};
use xsum::text::Vocabulary;
use xsum::train::{FitOptions, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG};

use crate::config::RunConfig;
use crate::output::{
    check_selections, check_summaries, read_jsonl, sha256_file, Manifest, RunDir, SelectionRow, SummaryRow,
    Versions, SELECTIONS, SUMMARIES,
};
use crate::plot::{histogram_svg, panels};
use crate::{Common, InferenceFlags, TrainFlags, UsageError, CACHE_ENV};

/// Shared state of one command: resolved configuration, run directory and
/// the inputs to fingerprint.
struct Run {
    name: &'static str,
    config: RunConfig,
    dir: RunDir,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn start(name: &'static str, common: &Common) -> anyhow::Result<Self> {
        let mut config = match &common.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.set_seed(seed);
        }
        let out = common.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
        let mut inputs = vec![common.data.clone()];
        inputs.extend(common.config.clone());
        Ok(Self {
            name,
            config,
            dir: RunDir::create(&out)?,
            inputs,
        })
    }

    fn finish(self) -> anyhow::Result<()> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let manifest = Manifest {
            command: self.name.to_string(),
            argv: std::env::args().skip(1).collect(),
            seed: self.config.train.seed,
            config_hash: config_hash(&self.config),
            config: serde_json::to_value(&self.config)?,
            versions: Versions::default(),
            inputs,
            outputs: BTreeMap::new(),
        };
        info!("{} finished; outputs in {}", self.name, self.dir.root.display());
        self.dir.finish(manifest)
    }
}

fn feature_store() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn load_samples(common: &Common, mut opts: LoadOptions, need_frames: bool) -> anyhow::Result<Vec<Sample>> {
    opts.features = feature_store();
    if need_frames && opts.features.is_none() {
        return Err(UsageError(format!("this command needs frame features; set {CACHE_ENV} to a feature store")).into());
    }
    let report = load_corpus(&common.data, &opts)?;
    if !report.is_clean() {
        let shown: Vec<String> = report.errors.iter().take(5).map(|e| e.to_string()).collect();
        bail!(
            "{} invalid record(s) in {}; run `xsum validate` for the full list. First: {}",
            report.errors.len(),
            common.data.display(),
            shown.join("; ")
        );
    }
    if report.samples.is_empty() {
        bail!("{} holds no records", common.data.display());
    }
    Ok(report.samples)
}

fn select_split(samples: Vec<Sample>, split: &str) -> anyhow::Result<Vec<Sample>> {
    if split == "all" {
        return Ok(samples);
    }
    let want: Split = split.parse().map_err(|e: xsum::Error| UsageError(e.to_string()))?;
    let chosen: Vec<Sample> = samples.into_iter().filter(|s| s.video.split == want).collect();
    if chosen.is_empty() {
        bail!("no records in the {} split", want.as_str());
    }
    Ok(chosen)
}

fn store_width() -> anyhow::Result<Option<usize>> {
    match feature_store() {
        Some(dir) => Ok(Some(FeatureStore::open(&dir)?.d_vis())),
        None => Ok(None),
    }
}

#[derive(Serialize)]
struct ValidationReport {
    records: usize,
    valid: usize,
    invalid: usize,
    errors: Vec<String>,
    warnings: Vec<String>,
    features_checked: bool,
    selections: Option<usize>,
    summaries: Option<usize>,
}

pub fn validate(common: &Common, selections: Option<&Path>, summaries: Option<&Path>) -> anyhow::Result<()> {
    let mut run = Run::start("validate", common)?;
    let mut opts = run.config.data.load_options();
    opts.features = feature_store();
    let report = load_corpus(&common.data, &opts)?;
    let mut errors: Vec<String> = report.errors.iter().map(|e| e.to_string()).collect();
    let mut checked = |path: Option<&Path>, f: &dyn Fn(&Path) -> anyhow::Result<usize>| -> Option<usize> {
        let path = path?;
        run.inputs.push(path.to_path_buf());
        match f(path) {
            Ok(n) => Some(n),
            Err(e) => {
                errors.push(format!("{}: {e:#}", path.display()));
                None
            }
        }
    };
    let sel = checked(selections, &|p| {
        let rows: Vec<SelectionRow> = read_jsonl(p)?;
        check_selections(&rows, &report.samples)?;
        Ok(rows.len())
    });
    let sum = checked(summaries, &|p| {
        let rows: Vec<SummaryRow> = read_jsonl(p)?;
        check_summaries(&rows, &report.samples)?;
        Ok(rows.len())
    });
    let out = ValidationReport {
        records: report.samples.len() + report.errors.len(),
        valid: report.samples.len(),
        invalid: report.errors.len(),
        errors: errors.clone(),
        warnings: report.warnings.clone(),
        features_checked: opts.features.is_some(),
        selections: sel,
        summaries: sum,
    };
    run.dir.write_json("validation.json", &out)?;
    run.finish()?;
    if !errors.is_empty() {
        bail!("validation failed with {} error(s); first: {}", errors.len(), errors[0]);
    }
    println!("{} records valid", out.valid);
    Ok(())
}

#[derive(Serialize)]
struct HumanConsistency {
    videos: usize,
    /// Percent.
    f1_avg: f64,
    /// Percent.
    f1_max: f64,
}

fn human_consistency(samples: &[Sample]) -> anyhow::Result<HumanConsistency> {
    let (mut avg, mut max) = (0.0, 0.0);
    for s in samples {
        let (a, m) = leave_one_out(&s.refs.label_matrix(s.video.frame_count)?)?;
        avg += a;
        max += m;
    }
    let n = samples.len() as f64;
    Ok(HumanConsistency {
        videos: samples.len(),
        f1_avg: 100.0 * avg / n,
        f1_max: 100.0 * max / n,
    })
}

pub fn stats(common: &Common) -> anyhow::Result<()> {
    let mut run = Run::start("stats", common)?;
    let samples = load_samples(common, run.config.data.load_options(), false)?;
    let corpus = compute_stats(&samples)?;
    let human = human_consistency(&samples)?;
    println!(
        "{} videos; mean length {:.1} s; ratio mean {:.2}% median {:.2}%; human F1 avg {:.1} max {:.1}",
        corpus.records,
        corpus.video_length.mean,
        corpus.ratio.mean * 100.0,
        corpus.ratio.median * 100.0,
        human.f1_avg,
        human.f1_max
    );
    run.dir.write_json("stats.json", &serde_json::json!({ "corpus": corpus, "human_consistency": human }))?;
    run.finish()
}

pub fn split(common: &Common, sizes: Option<SplitSizes>) -> anyhow::Result<()> {
    let mut run = Run::start("split", common)?;
    let opts = LoadOptions {
        default_split: Some(Split::Train),
        ..run.config.data.load_options()
    };
    let samples = load_samples(common, opts, false)?;
    let before = samples.len();
    let kept = filter_by_ratio(samples, run.config.data.ratio_threshold);
    let dropped = before - kept.len();
    let sizes = sizes.unwrap_or_else(|| run.config.data.split_sizes(kept.len()));
    if sizes.total() != kept.len() {
        return Err(UsageError(format!(
            "--sizes add up to {} but {} records remain after ratio filtering",
            sizes.total(),
            kept.len()
        ))
        .into());
    }
    let mut sets = split_corpus(kept, sizes, run.config.train.seed)?;
    let mut all = Vec::with_capacity(sizes.total());
    let mut deciles = BTreeMap::new();
    for split in Split::ALL {
        deciles.insert(split.as_str(), length_deciles(sets.get(split)));
        let part = match split {
            Split::Train => &mut sets.train,
            Split::Val => &mut sets.val,
            Split::Test => &mut sets.test,
        };
        for s in part.iter_mut() {
            s.video.split = split;
        }
        all.append(part);
    }
    write_corpus(&run.dir.file("split.jsonl"), &all)?;
    run.dir.write_json(
        "split.json",
        &serde_json::json!({
            "input_records": before,
            "dropped_by_ratio": dropped,
            "ratio_threshold": run.config.data.ratio_threshold,
            "sizes": sizes,
            "length_deciles": deciles,
        }),
    )?;
    println!("{} train, {} val, {} test ({} dropped)", sizes.train, sizes.val, sizes.test, dropped);
    run.finish()
}

pub fn train(common: &Common, flags: &TrainFlags, resume: Option<&Path>, val_metrics: bool) -> anyhow::Result<()> {
    let mut run = Run::start("train", common)?;
    let cfg = &mut run.config;
    if let Some(v) = flags.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = flags.lambda_v {
        cfg.train.lambda_v = v;
    }
    if let Some(v) = flags.lambda_t {
        cfg.train.lambda_t = v;
    }
    if let Some(v) = flags.window {
        cfg.model.vsum.window = v;
    }
    if let Some(v) = flags.max_video_len {
        cfg.model.video.max_len = v;
    }
    if let Some(v) = flags.max_gen_len {
        cfg.model.max_gen_len = v;
    }
    if let Some(d) = store_width()? {
        if d != cfg.model.video.d_vis {
            info!("using the feature store width {d} for d_vis (configured {})", cfg.model.video.d_vis);
            cfg.model.video.d_vis = d;
        }
    }
    if resume.is_none() && run.dir.root.join(LAST_CHECKPOINT).exists() {
        return Err(UsageError(format!(
            "{} already holds a checkpoint; pass --resume or choose another --out",
            run.dir.root.display()
        ))
        .into());
    }
    let samples = load_samples(common, run.config.data.load_options(), true)?;
    let train: Vec<Sample> = samples.iter().filter(|s| s.video.split == Split::Train).cloned().collect();
    let val: Vec<Sample> = samples.iter().filter(|s| s.video.split == Split::Val).cloned().collect();
    if train.is_empty() {
        bail!("no records in the train split");
    }
    let mut trainer = match resume {
        Some(path) => {
            run.inputs.push(path.to_path_buf());
            let t = Trainer::resume(path).with_context(|| format!("resuming from {}", path.display()))?;
            run.config.model = t.model.config.clone();
            run.config.train = t.config.clone();
            t
        }
        None => {
            run.config.train.validate().map_err(|e| UsageError(e.to_string()))?;
            let vocab = Vocabulary::build(train.iter().map(|s| s.refs.text_summary.as_str()), run.config.data.vocab_min_count);
            let model = VtsumModel::new(&run.config.model, vocab).map_err(|e| UsageError(e.to_string()))?;
            Trainer::new(model, run.config.train.clone())?
        }
    };
    info!(
        "training on {} videos ({} val), {} parameters, vocabulary of {}",
        train.len(),
        val.len(),
        trainer.model.store.num_scalars(),
        trainer.model.vocab.len()
    );
    let opts = FitOptions {
        out_dir: Some(run.dir.root.clone()),
        eval: val_metrics.then(|| run.config.eval),
        stop_after: None,
    };
    let records = trainer.fit(&train, &val, &opts)?;
    for name in [LAST_CHECKPOINT, BEST_CHECKPOINT, METRICS_LOG] {
        run.dir.file(name);
    }
    match records.last() {
        Some(r) => println!(
            "epoch {} train loss {:.4} val loss {}",
            r.epoch,
            r.train.total,
            r.val.map_or("-".into(), |v| format!("{:.4}", v.total))
        ),
        None => println!("no epochs to run; wrote {}", run.dir.root.join(LAST_CHECKPOINT).display()),
    }
    run.finish()
}

fn inference_options(run: &mut Run, flags: &InferenceFlags) -> InferenceOptions {
    let inf = &mut run.config.eval.inference;
    if let Some(v) = flags.budget_ratio {
        inf.budget_ratio = v;
    }
    if let Some(v) = flags.max_gen_len {
        inf.max_gen_len = v;
    }
    if let Some(v) = flags.decode {
        inf.decode = v;
    }
    *inf
}

fn load_model(run: &mut Run, flags: &InferenceFlags) -> anyhow::Result<VtsumModel> {
    run.inputs.push(flags.checkpoint.clone());
    let (model, header) = VtsumModel::from_checkpoint(&flags.checkpoint)
        .with_context(|| format!("loading {}", flags.checkpoint.display()))?;
    info!("loaded checkpoint at epoch {} step {}", header.epoch, header.step);
    run.config.model = model.config.clone();
    run.config.train = header.train;
    Ok(model)
}

fn check_ratio(ratio: f64) -> anyhow::Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(UsageError(format!("--budget-ratio must lie in (0, 1], got {ratio}")).into());
    }
    Ok(())
}

pub fn summarize(common: &Common, flags: &InferenceFlags) -> anyhow::Result<()> {
    let mut run = Run::start("summarize", common)?;
    let opts = inference_options(&mut run, flags);
    check_ratio(opts.budget_ratio)?;
    let model = load_model(&mut run, flags)?;
    let samples = select_split(load_samples(common, run.config.data.load_options(), true)?, &flags.split)?;
    let predictions = predict_all(&model, &samples, &opts)?;
    let selections: Vec<SelectionRow> = predictions
        .iter()
        .map(|p| SelectionRow {
            video_id: p.video_id.clone(),
            frame_count: p.scores.len(),
            budget_ratio: p.selection.budget_ratio,
            selected: p.selection.indices(),
            spans: labels_to_spans(&p.selection.keep).iter().map(|s| [s.start, s.end]).collect(),
            scores: p.scores.clone(),
        })
        .collect();
    let summaries: Vec<SummaryRow> = predictions
        .iter()
        .map(|p| SummaryRow {
            video_id: p.video_id.clone(),
            summary: p.summary.clone(),
            token_count: p.tokens.len(),
        })
        .collect();
    run.dir.write_jsonl(SELECTIONS, &selections)?;
    run.dir.write_jsonl(SUMMARIES, &summaries)?;
    println!("summarized {} videos", predictions.len());
    run.finish()
}

pub fn evaluate(
    common: &Common,
    flags: &InferenceFlags,
    dual: Option<&Path>,
    rank_target: Option<RankTarget>,
) -> anyhow::Result<()> {
    let mut run = Run::start("evaluate", common)?;
    inference_options(&mut run, flags);
    check_ratio(run.config.eval.inference.budget_ratio)?;
    if let Some(t) = rank_target {
        run.config.eval.rank_target = t;
    }
    let model = load_model(&mut run, flags)?;
    let dual = match dual {
        Some(path) => {
            run.inputs.push(path.to_path_buf());
            Some(DualEncoder::load(path).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };
    let samples = select_split(load_samples(common, run.config.data.load_options(), true)?, &flags.split)?;
    let (report, _) = run_evaluation(&model, &samples, &run.config.eval, dual.as_ref())?;
    report.write_json(&run.dir.file("report.json"))?;
    report.write_csv(&run.dir.file("per_video.csv"))?;
    let opt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.2}"));
    println!(
        "F1 avg {:.2} max {:.2}; tau {:.3} rho {:.3}; BLEU@4 {} ROUGE-L {} CIDEr {} VT-CLIPScore {}",
        report.f1_avg,
        report.f1_max,
        report.kendall_tau,
        report.spearman_rho,
        opt(report.bleu4),
        opt(report.rouge_l),
        opt(report.cider),
        opt(report.vt_clipscore)
    );
    run.finish()
}

/// Frames marked by a majority of annotators, paired with the text summary.
/// Falls back to every frame when no frame has a majority.
fn key_frame_pair(s: &Sample) -> anyhow::Result<ClipPair> {
    let FrameData::Features(f) = &s.video.frames else {
        bail!("video {} has no frame features", s.id());
    };
    let keep = majority_labels(&s.refs.label_matrix(f.nrows())?);
    let mut idx: Vec<usize> = keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect();
    if idx.is_empty() {
        idx = (0..f.nrows()).collect();
    }
    Ok(ClipPair {
        frames: f.select(Axis(0), &idx),
        text: s.refs.text_summary.clone(),
    })
}

#[derive(Serialize)]
struct ProbeReport {
    train_pairs: usize,
    probe_split: &'static str,
    probe_pairs: usize,
    steps: usize,
    final_loss: Option<f64>,
    /// Mean cosine similarity of matched frames and text.
    positive: f64,
    /// Same, with the words of each text shuffled.
    shuffled: f64,
    /// Same, with each text paired to another video.
    negative: f64,
}

pub fn finetune_score(common: &Common, steps: Option<usize>) -> anyhow::Result<()> {
    let mut run = Run::start("finetune-score", common)?;
    if let Some(s) = steps {
        run.config.contrastive.steps = s;
    }
    if let Some(d) = store_width()? {
        run.config.contrastive.model.d_vis = d;
    }
    let samples = load_samples(common, run.config.data.load_options(), true)?;
    let of = |split: Split| -> Vec<&Sample> { samples.iter().filter(|s| s.video.split == split).collect() };
    let train = of(Split::Train);
    let train = if train.is_empty() { samples.iter().collect() } else { train };
    let (probe_split, probe) = [Split::Test, Split::Val]
        .into_iter()
        .map(|s| (s.as_str(), of(s)))
        .find(|(_, v)| v.len() >= 2)
        .unwrap_or(("train", train.clone()));
    let pairs: Vec<ClipPair> = train.iter().map(|s| key_frame_pair(s)).collect::<anyhow::Result<_>>()?;
    let probe_pairs: Vec<ClipPair> = probe.iter().map(|s| key_frame_pair(s)).collect::<anyhow::Result<_>>()?;
    let vocab = Vocabulary::build(pairs.iter().map(|p| p.text.as_str()), run.config.data.vocab_min_count);
    let (dual, losses) = finetune_dual_encoder(&pairs, vocab, &run.config.contrastive)?;
    dual.save(&run.dir.file("dual.ckpt"))?;
    let loss_rows: Vec<serde_json::Value> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::json!({ "step": i + 1, "loss": l }))
        .collect();
    run.dir.write_jsonl("losses.jsonl", &loss_rows)?;
    let p = similarity_probe(&dual, &probe_pairs, run.config.contrastive.seed)?;
    let report = ProbeReport {
        train_pairs: pairs.len(),
        probe_split,
        probe_pairs: probe_pairs.len(),
        steps: losses.len(),
        final_loss: losses.last().copied(),
        positive: p.positive,
        shuffled: p.shuffled,
        negative: p.negative,
    };
    run.dir.write_json("probe.json", &report)?;
    println!(
        "similarity on {} {} pairs: matched {:.3}, shuffled {:.3}, mismatched {:.3}",
        report.probe_pairs, probe_split, p.positive, p.shuffled, p.negative
    );
    run.finish()
}

pub fn plot(common: &Common) -> anyhow::Result<()> {
    let mut run = Run::start("plot", common)?;
    let samples = load_samples(common, run.config.data.load_options(), false)?;
    let stats = compute_stats(&samples)?;
    for (stem, title, x_label, hist) in panels(&stats) {
        let path = run.dir.file(&format!("{stem}.svg"));
        std::fs::write(&path, histogram_svg(hist, title, x_label))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    run.dir.write_json("stats.json", &stats)?;
    println!("wrote {} histograms to {}", panels(&stats).len(), run.dir.root.display());
    run.finish()
}
