//! Analysis/synthesis adapters producing F0, spectral envelope and aperiodicity.
//!
//! Every adapter follows the same frame contract: a signal of `n` samples
//! analysed at `frame_period_ms` yields `floor(1000 n / (fs * frame_period)) + 1`
//! frames, frame `i` centred on time `i * frame_period`, and synthesis of `T`
//! frames yields `floor(T * frame_period * fs / 1000)` samples.

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{EvcError, Result};
use crate::tape::Mat;

mod toy;
#[cfg(feature = "world")]
mod world;

pub use toy::ToyVocoder;
#[cfg(feature = "world")]
pub use world::WorldVocoder;

/// Per-frame vocoder parameters. `sp` and `ap` are `T x (fft_size / 2 + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub f0: Vec<f64>,
    pub sp: Mat,
    pub ap: Mat,
}

pub trait Vocoder: Send + Sync {
    fn name(&self) -> &'static str;

    fn fft_size(&self) -> usize;

    fn analyze(&self, wave: &Waveform, frame_period_ms: f64) -> Result<Analysis>;

    fn synthesize(
        &self,
        f0: &[f64],
        sp: &Mat,
        ap: &Mat,
        frame_period_ms: f64,
        sample_rate: u32,
    ) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocoderKind {
    World,
    Toy,
}

impl std::str::FromStr for VocoderKind {
    type Err = EvcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "world" => Ok(VocoderKind::World),
            "toy" => Ok(VocoderKind::Toy),
            other => Err(EvcError::config(format!(
                "unknown vocoder `{other}` (expected \"world\" or \"toy\")"
            ))),
        }
    }
}

pub fn frame_count(n_samples: usize, sample_rate: u32, frame_period_ms: f64) -> usize {
    (1000.0 * n_samples as f64 / sample_rate as f64 / frame_period_ms) as usize + 1
}

pub fn synthesis_len(frames: usize, sample_rate: u32, frame_period_ms: f64) -> usize {
    (frames as f64 * frame_period_ms * sample_rate as f64 / 1000.0) as usize
}

/// Instantiates an adapter. `World` needs the `world` cargo feature.
pub fn make_vocoder(kind: VocoderKind, sample_rate: u32, fft_size: usize) -> Result<Box<dyn Vocoder>> {
    match kind {
        VocoderKind::Toy => Ok(Box::new(ToyVocoder::new(fft_size)?)),
        #[cfg(feature = "world")]
        VocoderKind::World => Ok(Box::new(WorldVocoder::new(sample_rate, fft_size)?)),
        #[cfg(not(feature = "world"))]
        VocoderKind::World => {
            let _ = sample_rate;
            Err(EvcError::config(
                "vocoder = \"world\" requires building with the `world` feature",
            ))
        }
    }
}

pub(crate) fn check_frames(f0: &[f64], sp: &Mat, ap: &Mat, bins: usize) -> Result<()> {
    if f0.is_empty() {
        return Err(EvcError::invalid("cannot synthesise zero frames"));
    }
    if sp.nrows() != f0.len() || ap.nrows() != f0.len() {
        return Err(EvcError::invalid(format!(
            "frame counts disagree: f0 {}, sp {}, ap {}",
            f0.len(),
            sp.nrows(),
            ap.nrows()
        )));
    }
    if sp.ncols() != bins || ap.ncols() != bins {
        return Err(EvcError::invalid(format!(
            "expected {bins} frequency bins, got sp {} / ap {}",
            sp.ncols(),
            ap.ncols()
        )));
    }
    Ok(())
}
