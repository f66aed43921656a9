//! Synthetic emotional speech for desk-scale runs.
//!
//! Each utterance is a few harmonic "syllables" separated by short pauses.
//! Classes differ in pitch range, spectral tilt, loudness and modulation:
//! angry is high, bright and loud; sad is low, dark and soft; happy sits in
//! between with a 5 Hz vibrato. Two speakers differ in pitch and formant scale.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{EvcError, Result};
use crate::features::{CorpusManifest, ManifestEntry, Split};

const SR: u32 = 16_000;

#[derive(Clone, Copy, Debug)]
pub struct ClassStyle {
    pub f0_hz: f64,
    /// Harmonic amplitude falls as `k^-tilt`.
    pub tilt: f64,
    pub gain: f64,
    pub vibrato_depth: f64,
}

pub fn class_style(emotion: &str) -> Option<ClassStyle> {
    match emotion {
        "angry" => Some(ClassStyle {
            f0_hz: 220.0,
            tilt: 0.6,
            gain: 0.75,
            vibrato_depth: 0.0,
        }),
        "sad" => Some(ClassStyle {
            f0_hz: 120.0,
            tilt: 2.0,
            gain: 0.3,
            vibrato_depth: 0.0,
        }),
        "happy" => Some(ClassStyle {
            f0_hz: 170.0,
            tilt: 1.2,
            gain: 0.55,
            vibrato_depth: 0.06,
        }),
        _ => None,
    }
}

const SPEAKERS: [(&str, f64, f64); 2] = [("spk1", 1.0, 1.0), ("spk2", 0.85, 0.92)];

/// Two-formant resonance gain at `freq`.
fn formant_gain(freq: f64, formants: &[(f64, f64)]) -> f64 {
    1.0 + formants
        .iter()
        .map(|&(fc, bw)| 3.0 / (1.0 + ((freq - fc) / bw).powi(2)))
        .sum::<f64>()
}

fn syllable(rng: &mut ChaCha8Rng, style: ClassStyle, pitch_scale: f64, formant_scale: f64, out: &mut Vec<f64>) {
    let dur = rng.gen_range(0.18..0.28);
    let n = (dur * SR as f64) as usize;
    let f_start = style.f0_hz * pitch_scale * rng.gen_range(0.93..1.07);
    let f_end = f_start * rng.gen_range(0.88..1.0);
    let formants = [
        (rng.gen_range(400.0..900.0) * formant_scale, 120.0),
        (rng.gen_range(1100.0..2400.0) * formant_scale, 200.0),
    ];
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    for i in 0..n {
        let t = i as f64 / n as f64;
        let mut f0 = f_start + (f_end - f_start) * t;
        f0 *= 1.0 + style.vibrato_depth * (2.0 * PI * 5.0 * i as f64 / SR as f64 + vib_phase).sin();
        phase += 2.0 * PI * f0 / SR as f64;
        let env = (PI * t).sin().powf(0.6);
        let mut s = 0.0;
        let mut k = 1;
        while k as f64 * f0 < 0.45 * SR as f64 {
            let kf = k as f64;
            s += kf.powf(-style.tilt) * formant_gain(kf * f0, &formants) * (kf * phase).sin();
            k += 1;
        }
        out.push(env * s);
    }
}

/// One utterance of the given class and speaker.
pub fn toy_utterance(rng: &mut ChaCha8Rng, emotion: &str, speaker: usize) -> Result<Waveform> {
    let style = class_style(emotion)
        .ok_or_else(|| EvcError::config(format!("toy corpus has no style for emotion `{emotion}`")))?;
    let (_, pitch_scale, formant_scale) = SPEAKERS[speaker % SPEAKERS.len()];
    let mut samples = vec![0.0; (0.05 * SR as f64) as usize];
    let syllables = rng.gen_range(3..=4);
    for _ in 0..syllables {
        syllable(rng, style, pitch_scale, formant_scale, &mut samples);
        let gap = rng.gen_range(0.04..0.08);
        samples.extend(std::iter::repeat(0.0).take((gap * SR as f64) as usize));
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let g = style.gain / peak.max(1e-12);
    for s in &mut samples {
        *s *= g;
    }
    Waveform::new(samples, SR)
}

/// Writes `wavs/<emotion>_<speaker>_<index>.wav` files and `manifest.csv` under `out_dir`.
///
/// Within each class, `n_per_class / 5` items go to validation and as many to
/// test; the rest are training data. Speakers alternate.
pub fn generate_toy_corpus(out_dir: &Path, labels: &[String], n_per_class: usize, seed: u64) -> Result<CorpusManifest> {
    if n_per_class == 0 {
        return Err(EvcError::config("n_per_class must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held_out = n_per_class / 5;
    let mut entries = Vec::new();
    for emotion in labels {
        for i in 0..n_per_class {
            let spk = i % SPEAKERS.len();
            let wave = toy_utterance(&mut rng, emotion, spk)?;
            let rel = Path::new("wavs").join(format!("{emotion}_{}_{i:03}.wav", SPEAKERS[spk].0));
            wave.write_wav(&out_dir.join(&rel))?;
            let split = if i >= n_per_class - held_out {
                Split::Test
            } else if i >= n_per_class - 2 * held_out {
                Split::Validation
            } else {
                Split::Train
            };
            entries.push(ManifestEntry {
                path: rel,
                speaker: SPEAKERS[spk].0.to_string(),
                emotion: emotion.clone(),
                split,
            });
        }
    }
    let manifest = CorpusManifest::new(out_dir, entries);
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::f0::{log_f0_stats, Spread};
    use crate::vocoder::{ToyVocoder, Vocoder};

    fn labels() -> Vec<String> {
        ["angry", "sad", "happy"].map(String::from).to_vec()
    }

    #[test]
    fn deterministic_and_sized() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_toy_corpus(a.path(), &labels(), 5, 9).unwrap();
        generate_toy_corpus(b.path(), &labels(), 5, 9).unwrap();
        assert_eq!(ma.entries.len(), 15);
        for e in &ma.entries {
            assert_eq!(std::fs::read(a.path().join(&e.path)).unwrap(), std::fs::read(b.path().join(&e.path)).unwrap());
        }
        assert_eq!(ma.split(Split::Test).count(), 3);
        assert_eq!(ma.split(Split::Validation).count(), 3);
        assert_eq!(
            std::fs::read(a.path().join("manifest.csv")).unwrap(),
            std::fs::read(b.path().join("manifest.csv")).unwrap()
        );
    }

    #[test]
    fn sad_is_lower_than_angry() {
        let voc = ToyVocoder::new(1024).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mean = |emo: &str| {
            let w = toy_utterance(&mut rng, emo, 0).unwrap();
            log_f0_stats(&voc.analyze(&w, 5.0).unwrap().f0, Spread::Std).unwrap().mu
        };
        let sad = mean("sad");
        let angry = mean("angry");
        assert!(sad < angry, "sad {sad} angry {angry}");
    }

    #[test]
    fn unknown_label_and_zero_count_rejected() {
        let d = tempfile::tempdir().unwrap();
        assert!(generate_toy_corpus(d.path(), &labels(), 0, 1).is_err());
        assert!(generate_toy_corpus(d.path(), &["bored".to_string()], 1, 1).is_err());
    }
}
