//! Mel-cepstral distortion between utterances, with and without time alignment.
//!
//! ```text
//! cargo run --release --example mcd_eval
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evc::features::FeatureExtractor;
use evc::mcd::{dtw_align, mcd, mcd_constant, McdSettings};
use evc::toy_corpus::toy_utterance;

fn main() -> evc::Result<()> {
    let cfg = evc::workflow::toy_config();
    let extractor = FeatureExtractor::new(&cfg.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut feats = |emo: &str| -> evc::Result<_> {
        let w = toy_utterance(&mut rng, emo, 0)?;
        extractor.extract(&w, emo, "spk0", emo)
    };
    let a1 = feats("angry")?;
    let a2 = feats("angry")?;
    let s1 = feats("sad")?;

    let dtw = McdSettings::default();
    println!("one unit in one coefficient: {:.4} dB", mcd_constant());
    println!("angry vs itself:  {:.3} dB", mcd(a1.mcep()?, a1.mcep()?, &dtw)?);
    println!("angry vs angry:   {:.3} dB", mcd(a1.mcep()?, a2.mcep()?, &dtw)?);
    println!("angry vs sad:     {:.3} dB", mcd(a1.mcep()?, s1.mcep()?, &dtw)?);

    let path = dtw_align(a1.mcep()?, s1.mcep()?)?;
    println!(
        "alignment of {} and {} frames: {} steps, cost {:.2}",
        a1.frames(),
        s1.frames(),
        path.path.len(),
        path.cost
    );
    let n = a1.frames().min(s1.frames());
    let cut = |m: &evc::tape::Mat| m.slice(ndarray::s![..n, ..]).to_owned();
    let framewise = McdSettings { dtw: false, ..dtw };
    println!(
        "framewise on the first {n} frames: {:.3} dB",
        mcd(&cut(a1.mcep()?), &cut(s1.mcep()?), &framewise)?
    );
    Ok(())
}
