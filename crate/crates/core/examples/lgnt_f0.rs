//! Shifts the pitch statistics of a synthetic "sad" utterance towards "angry".
//!
//! ```text
//! cargo run --release --example lgnt_f0
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evc::f0::{log_f0_stats, lgnt_convert, PairDelta, Spread};
use evc::features::FeatureExtractor;
use evc::toy_corpus::toy_utterance;

fn main() -> evc::Result<()> {
    let cfg = evc::workflow::toy_config();
    let extractor = FeatureExtractor::new(&cfg.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sad = extractor.decompose(&toy_utterance(&mut rng, "sad", 0)?, "sad0", "spk0", "sad")?;
    let angry = extractor.decompose(&toy_utterance(&mut rng, "angry", 0)?, "angry0", "spk0", "angry")?;

    let s = log_f0_stats(&sad.f0, Spread::Std).expect("voiced");
    let a = log_f0_stats(&angry.f0, Spread::Std).expect("voiced");
    println!("sad   ln-F0 mean {:.4} std {:.4}", s.mu, s.sigma);
    println!("angry ln-F0 mean {:.4} std {:.4}", a.mu, a.sigma);

    let delta = PairDelta {
        dmu: a.mu - s.mu,
        dsigma: a.sigma - s.sigma,
    };
    let out = lgnt_convert(&sad.f0, delta, Spread::Std);
    let c = log_f0_stats(&out.f0, Spread::Std).expect("voiced");
    println!("converted     mean {:.4} std {:.4}", c.mu, c.sigma);
    let unvoiced = sad.f0.iter().zip(&out.f0).filter(|(x, _)| **x == 0.0).all(|(_, y)| *y == 0.0);
    println!("unvoiced frames untouched: {unvoiced}");
    Ok(())
}
