//! Trains a complete model bundle on the synthetic corpus.
//!
//! ```text
//! cargo run --release --example train_toy -- [out_dir] [utterances_per_class] [stage1_steps]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use evc::workflow;

fn main() -> evc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy_run".into()));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let steps: Option<usize> = args.next().and_then(|s| s.parse().ok());
    let cfg = workflow::toy_config();

    let t = Instant::now();
    let manifest = workflow::gen_toy(&cfg, &out.join("corpus"), n)?;
    let cache = workflow::cache_dir(&cfg, &manifest, None);
    workflow::ingest(&cfg, &manifest, &cache)?;
    println!("corpus + features: {:.1}s", t.elapsed().as_secs_f64());

    let bundle = out.join("bundle");
    let t = Instant::now();
    let c = workflow::train_classifier_step(&cfg, &manifest, &cache, &bundle)?;
    println!("classifier: train accuracy {:.3} ({:.1}s)", c.train_accuracy, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let s1 = workflow::train_stage1_step(&cfg, &manifest, &cache, &bundle, steps)?;
    println!(
        "stage 1: {} steps, reconstruction L1 {:.4} -> {:.4} ({:.1}s)",
        s1.steps,
        s1.initial_reconstruction_l1,
        s1.final_reconstruction_l1,
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let s2 = workflow::train_stage2_step(&cfg, &manifest, &cache, &bundle)?;
    println!(
        "stage 2: {} epochs ({}), cycle L1 {:.4} vs untrained {:.4}, domain accuracy {:.3} ({:.1}s)",
        s2.epochs,
        s2.stop_reason,
        s2.final_cycle_l1,
        s2.untrained_cycle_l1,
        s2.domain_accuracy,
        t.elapsed().as_secs_f64()
    );
    println!("bundle written to {}", bundle.display());
    Ok(())
}
