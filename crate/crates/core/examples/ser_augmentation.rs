//! Trains a bundle on the toy corpus, converts the training split into every
//! other emotion and measures emotion recognition with and without the
//! converted data.
//!
//! ```text
//! cargo run --release --example ser_augmentation -- [out_dir] [utterances_per_class]
//! ```

use std::path::PathBuf;

use evc::convert::parse_pairs;
use evc::features::Split;
use evc::workflow;

fn main() -> evc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "ser_run".into()));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = workflow::toy_config();

    let manifest = workflow::gen_toy(&cfg, &out.join("corpus"), n)?;
    let cache = workflow::cache_dir(&cfg, &manifest, None);
    workflow::ingest(&cfg, &manifest, &cache)?;
    let bundle = out.join("bundle");
    workflow::train_classifier_step(&cfg, &manifest, &cache, &bundle)?;
    workflow::train_stage1_step(&cfg, &manifest, &cache, &bundle, None)?;
    workflow::train_stage2_step(&cfg, &manifest, &cache, &bundle)?;

    let labels = &cfg.data.labels;
    let pairs: Vec<String> = labels
        .iter()
        .flat_map(|a| labels.iter().filter(move |b| *b != a).map(move |b| format!("{a}:{b}")))
        .collect();
    let conv = out.join("converted");
    let rows = workflow::convert_corpus_step(
        &cfg,
        &manifest,
        Some(Split::Train),
        &parse_pairs(&pairs.join(","))?,
        &bundle,
        &conv,
    )?;
    println!("{} converted training utterances", rows.len());

    let mcd = workflow::evaluate_mcd_step(&cfg, &manifest, &rows)?;
    println!("MCD to source: {:.2} dB overall", mcd.overall);

    let result = workflow::augment_experiment_step(&cfg, &manifest, &conv.join("index.csv"), None)?;
    for v in &result.variants {
        println!(
            "{:<14} {:>4} train utterances  micro-F1 {:6.2} ± {:.2}  macro-F1 {:6.2} ± {:.2}",
            v.variant, v.train_size, v.micro_f1, v.micro_f1_std, v.macro_f1, v.macro_f1_std
        );
    }
    workflow::save_json(&out.join("results.json"), &result)?;
    Ok(())
}
