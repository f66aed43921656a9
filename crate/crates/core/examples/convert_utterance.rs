//! Converts one file with a trained bundle, e.g. one written by `train_toy`.
//!
//! ```text
//! cargo run --release --example convert_utterance -- <bundle_dir> <in.wav> <source> <target> [out.wav]
//! ```

use std::path::PathBuf;

use evc::f0::{log_f0_stats, Spread};
use evc::workflow;

fn main() -> evc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 4 {
        eprintln!("usage: convert_utterance <bundle_dir> <in.wav> <source> <target> [out.wav]");
        std::process::exit(2);
    }
    let bundle = PathBuf::from(&args[0]);
    let input = PathBuf::from(&args[1]);
    let out = PathBuf::from(args.get(4).cloned().unwrap_or_else(|| "converted.wav".into()));
    let cfg = workflow::bundle_config(&bundle)?.unwrap_or_else(workflow::toy_config);

    let feats = workflow::convert_file(&cfg, &bundle, &input, &args[2], &args[3], &out)?;
    let before = evc::features::FeatureExtractor::new(&cfg.data)?
        .decompose(&evc::audio::Waveform::read_wav(&input)?, "in", "in", &args[2])?;
    let stats = |f0: &[f64]| log_f0_stats(f0, Spread::Std).map(|s| s.mu.exp()).unwrap_or(0.0);
    println!(
        "{} -> {}: {} frames, mean F0 {:.1} Hz -> {:.1} Hz, written to {}",
        args[2],
        args[3],
        feats.frames(),
        stats(&before.f0),
        stats(&feats.f0),
        out.display()
    );
    Ok(())
}
