//! Mono waveforms and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{EvcError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(EvcError::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(EvcError::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Reads a mono WAV file (integer or float PCM). Multichannel files are rejected.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| EvcError::data(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(EvcError::data(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM mono, clipping to [-1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut bytes = std::io::Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut bytes, spec)?;
            for &x in &self.samples {
                w.write_sample(to_pcm16(x))?;
            }
            w.finalize()?;
        }
        crate::archive::write_atomic(path, &bytes.into_inner())
    }
}

fn to_pcm16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_roundtrip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 1.5], 16_000).unwrap();
        w.write_wav(&path).unwrap();
        let r = Waveform::read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16_000);
        assert!((r.samples[1] - 0.5).abs() < 1e-4);
        assert!((r.samples[3] - 32767.0 / 32768.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_finite_and_zero_rate() {
        assert!(Waveform::new(vec![f64::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }
}
