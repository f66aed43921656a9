//! Writes the synthetic corpus and summarises its pitch by class.
//!
//! ```text
//! cargo run --release --example toy_corpus -- [out_dir] [utterances_per_class]
//! ```

use std::path::PathBuf;

use evc::f0::{log_f0_stats, Spread};
use evc::features::{by_emotion, load_split, Split};
use evc::workflow;

fn main() -> evc::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy_corpus".into()));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let cfg = workflow::toy_config();
    let manifest = workflow::gen_toy(&cfg, &out, n)?;
    let cache = workflow::cache_dir(&cfg, &manifest, None);
    workflow::ingest(&cfg, &manifest, &cache)?;
    println!("{} utterances under {}", manifest.entries.len(), out.display());

    for split in [Split::Train, Split::Validation, Split::Test] {
        println!("{split:?}: {}", manifest.split(split).count());
    }
    let train = load_split(&manifest, &cache, Split::Train)?;
    for (emotion, idx) in by_emotion(&train) {
        let f0: Vec<f64> = idx.iter().flat_map(|&i| train[i].f0.iter().copied()).collect();
        let s = log_f0_stats(&f0, Spread::Std).expect("voiced");
        println!(
            "{emotion:<6} mean F0 {:6.1} Hz  ln-F0 std {:.3}  ({} utterances)",
            s.mu.exp(),
            s.sigma,
            idx.len()
        );
    }
    Ok(())
}
