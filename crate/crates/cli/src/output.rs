//! Files written under a run directory: the manifest, JSON documents and
//! the JSON-lines rows produced by `summarize`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xsum::dataset::{labels_to_spans, Sample};
use xsum::vsum::budget;

pub const MANIFEST: &str = "run.json";
pub const SELECTIONS: &str = "selections.jsonl";
pub const SUMMARIES: &str = "summaries.jsonl";

/// One frame selection, as written by `summarize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRow {
    pub video_id: String,
    pub frame_count: usize,
    pub budget_ratio: f64,
    /// Selected frame indices, ascending.
    pub selected: Vec<usize>,
    /// The selection as maximal `[start, end)` runs.
    pub spans: Vec<[usize; 2]>,
    pub scores: Vec<f64>,
}

/// One generated text summary, as written by `summarize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub video_id: String,
    pub summary: String,
    pub token_count: usize,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub xsum: &'static str,
    pub cli: &'static str,
    pub checkpoint_format: u32,
    pub feature_store: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            xsum: xsum::VERSION,
            cli: env!("CARGO_PKG_VERSION"),
            checkpoint_format: xsum::checkpoint::FORMAT_VERSION,
            feature_store: xsum::dataset::FEATURE_STORE_VERSION,
        }
    }
}

/// Record of one command invocation. Holds nothing time- or host-dependent
/// so that repeated runs produce the same bytes.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub versions: Versions,
    /// SHA-256 of every input file, by path as given.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file, by name relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects output files of a run and writes the manifest last.
pub struct RunDir {
    pub root: PathBuf,
    outputs: BTreeSet<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: BTreeSet::new(),
        })
    }

    /// Path of an output file, registered for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        self.outputs.insert(name.to_string());
        self.root.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let path = self.file(name);
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> anyhow::Result<PathBuf> {
        let path = self.file(name);
        let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        for row in rows {
            writeln!(f, "{}", serde_json::to_string(row)?)?;
        }
        Ok(path)
    }

    pub fn finish(self, mut manifest: Manifest) -> anyhow::Result<()> {
        for name in &self.outputs {
            let path = self.root.join(name);
            if path.exists() {
                manifest.outputs.insert(name.clone(), sha256_file(&path)?);
            }
        }
        let path = self.root.join(MANIFEST);
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(rows)
}

fn find<'a>(samples: &'a BTreeMap<&str, &Sample>, id: &str) -> anyhow::Result<&'a Sample> {
    samples.get(id).copied().with_context(|| format!("video {id} is not in the corpus"))
}

/// Checks selection rows against the corpus: ids known and unique, indices
/// sorted and in range, size equal to the budget, and spans and scores
/// consistent with the indices.
pub fn check_selections(rows: &[SelectionRow], samples: &[Sample]) -> anyhow::Result<()> {
    let index: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id(), s)).collect();
    let mut seen = BTreeSet::new();
    for r in rows {
        let id = &r.video_id;
        ensure!(seen.insert(id.clone()), "video {id} selected twice");
        let s = find(&index, id)?;
        ensure!(
            r.frame_count == s.video.frame_count,
            "video {id}: frame_count {} but the corpus says {}",
            r.frame_count,
            s.video.frame_count
        );
        ensure!(r.scores.len() == r.frame_count, "video {id}: {} scores for {} frames", r.scores.len(), r.frame_count);
        if r.selected.windows(2).any(|w| w[0] >= w[1]) || r.selected.last().is_some_and(|&i| i >= r.frame_count) {
            bail!("video {id}: selected indices must be ascending, unique and below {}", r.frame_count);
        }
        let want = budget(r.frame_count, r.budget_ratio);
        ensure!(r.selected.len() == want, "video {id}: {} frames selected, budget is {want}", r.selected.len());
        let mut keep = vec![false; r.frame_count];
        for &i in &r.selected {
            keep[i] = true;
        }
        let spans: Vec<[usize; 2]> = labels_to_spans(&keep).iter().map(|s| [s.start, s.end]).collect();
        ensure!(spans == r.spans, "video {id}: spans do not match the selected indices");
    }
    Ok(())
}

/// Checks summary rows: ids known and unique, `token_count` equal to the
/// number of words in `summary`.
pub fn check_summaries(rows: &[SummaryRow], samples: &[Sample]) -> anyhow::Result<()> {
    let index: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id(), s)).collect();
    let mut seen = BTreeSet::new();
    for r in rows {
        let id = &r.video_id;
        ensure!(seen.insert(id.clone()), "video {id} summarized twice");
        find(&index, id)?;
        let words = r.summary.split_whitespace().count();
        ensure!(
            words == r.token_count,
            "video {id}: token_count {} but the summary has {words} words",
            r.token_count
        );
    }
    Ok(())
}
