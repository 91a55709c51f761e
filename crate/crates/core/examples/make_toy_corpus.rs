//! Writes a small synthetic corpus: an annotation file plus a frame-feature
//! store, split 60/20/20.
//!
//! ```text
//! cargo run --example make_toy_corpus -- <out_dir> [videos] [seed]
//! XSUM_CACHE=<out_dir>/features xsum train --data <out_dir>/toy.jsonl ...
//! ```

use std::path::PathBuf;

use xsum::dataset::{split_corpus, write_corpus, FeatureStore, FrameData, Split, SplitSizes};
use xsum::synth::{generate, SynthConfig};

fn main() -> xsum::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let videos: usize = args.next().map_or(40, |v| v.parse().expect("videos must be a number"));
    let seed: u64 = args.next().map_or(0, |v| v.parse().expect("seed must be a number"));

    let cfg = SynthConfig {
        videos,
        seed,
        ..Default::default()
    };
    let corpus = generate(&cfg);
    let features: Vec<(&str, &ndarray::Array2<f64>)> = corpus
        .samples
        .iter()
        .filter_map(|s| match &s.video.frames {
            FrameData::Features(f) => Some((s.video.video_id.as_str(), f)),
            _ => None,
        })
        .collect();
    FeatureStore::write(&out.join("features"), cfg.d_vis, features)?;

    let val = videos / 5;
    let test = videos / 5;
    let sets = split_corpus(corpus.samples, SplitSizes::new(videos - val - test, val, test), seed)?;
    let mut all = Vec::with_capacity(videos);
    for split in Split::ALL {
        for mut s in sets.get(split).to_vec() {
            s.video.split = split;
            all.push(s);
        }
    }
    write_corpus(&out.join("toy.jsonl"), &all)?;
    println!("wrote {} videos to {}", all.len(), out.display());
    Ok(())
}
