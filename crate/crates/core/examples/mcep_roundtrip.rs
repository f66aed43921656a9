//! Analysis, mel-cepstral compression and resynthesis of one utterance.
//!
//! ```text
//! cargo run --release --example mcep_roundtrip -- [out.wav]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evc::features::FeatureExtractor;
use evc::toy_corpus::toy_utterance;

fn main() -> evc::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "roundtrip.wav".into());
    let cfg = evc::workflow::toy_config();
    let extractor = FeatureExtractor::new(&cfg.data)?;
    let wave = toy_utterance(&mut ChaCha8Rng::seed_from_u64(3), "happy", 1)?;
    let feats = extractor.extract(&wave, "happy", "spk1", "happy")?;
    let mc = feats.mcep()?;
    println!(
        "{} samples -> {} frames, sp {} bins, mcep {} coefficients ({})",
        wave.len(),
        feats.frames(),
        feats.sp.ncols(),
        mc.ncols(),
        extractor.vocoder().name()
    );

    let rebuilt = extractor.mel_cepstrum().mcep_to_sp(mc)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in feats.sp.iter().zip(rebuilt.iter()) {
        sum += (10.0 * (a / b).log10()).powi(2);
        n += 1;
    }
    println!("log-spectral distance of the envelope fit: {:.3} dB", (sum / n as f64).sqrt());

    let mut smooth = feats.clone();
    smooth.sp = rebuilt;
    let y = extractor.synthesize(&smooth)?;
    y.write_wav(std::path::Path::new(&out))?;
    println!("resynthesised {} samples (peak {:.3}) to {out}", y.len(), y.peak());
    Ok(())
}
