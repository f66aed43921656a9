//! A small deterministic sinusoidal vocoder.
//!
//! Analysis: YIN-style pitch per frame, envelope sampled at harmonic peaks of a
//! Hann-windowed power spectrum (log-linear interpolation between harmonics),
//! and a flat aperiodicity taken from the pitch detector's dip depth.
//! Synthesis: phase-continuous harmonic sum plus overlap-added shaped noise
//! from a fixed-seed generator. Envelopes are calibrated so that a sinusoid of
//! amplitude `A` has envelope value `A^2` at its frequency.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::{check_frames, frame_count, synthesis_len, Analysis, Vocoder};
use crate::audio::Waveform;
use crate::error::{EvcError, Result};
use crate::tape::Mat;

const F0_MIN: f64 = 60.0;
const F0_MAX: f64 = 500.0;
const YIN_THRESHOLD: f64 = 0.15;
const SILENCE_RMS: f64 = 1e-3;
const SP_FLOOR: f64 = 1e-12;
const NOISE_SEED: u64 = 0x5eed_70f0;

pub struct ToyVocoder {
    fft_size: usize,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl ToyVocoder {
    pub fn new(fft_size: usize) -> Result<Self> {
        if fft_size < 256 || !fft_size.is_power_of_two() {
            return Err(EvcError::config(format!(
                "toy vocoder needs a power-of-two fft size >= 256, got {fft_size}"
            )));
        }
        let window = (0..fft_size)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / fft_size as f64).cos())
            .collect();
        let mut planner = RealFftPlanner::new();
        Ok(ToyVocoder {
            fft_size,
            window,
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        })
    }

    fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    fn segment(x: &[f64], center: usize, len: usize) -> Vec<f64> {
        let start = center as isize - (len / 2) as isize;
        (0..len)
            .map(|i| {
                let j = start + i as isize;
                if j >= 0 && (j as usize) < x.len() {
                    x[j as usize]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Returns `(f0, dip)`; `f0 = 0` for unvoiced frames.
    fn pitch(&self, seg: &[f64], fs: f64) -> (f64, f64) {
        let rms = (seg.iter().map(|x| x * x).sum::<f64>() / seg.len() as f64).sqrt();
        if rms < SILENCE_RMS {
            return (0.0, 1.0);
        }
        let tau_min = (fs / F0_MAX).floor() as usize;
        let tau_max = (fs / F0_MIN).ceil() as usize;
        let w = seg.len() - tau_max - 1;
        let mut d = vec![0.0; tau_max + 2];
        for (tau, dt) in d.iter_mut().enumerate().skip(1) {
            *dt = (0..w).map(|j| (seg[j] - seg[j + tau]).powi(2)).sum();
        }
        let mut cmnd = vec![1.0; tau_max + 2];
        let mut running = 0.0;
        for tau in 1..d.len() {
            running += d[tau];
            cmnd[tau] = if running > 0.0 {
                d[tau] * tau as f64 / running
            } else {
                1.0
            };
        }
        let mut best = None;
        let mut tau = tau_min.max(2);
        while tau <= tau_max {
            if cmnd[tau] < YIN_THRESHOLD {
                while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                    tau += 1;
                }
                best = Some(tau);
                break;
            }
            tau += 1;
        }
        let Some(tau) = best else {
            return (0.0, 1.0);
        };
        let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 {
            (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        (fs / (tau as f64 + shift), b.clamp(1e-3, 1.0))
    }

    fn power_spectrum(&self, seg: &[f64]) -> Vec<f64> {
        let mut buf: Vec<f64> = seg.iter().zip(&self.window).map(|(x, w)| x * w).collect();
        let mut spec = vec![Complex::new(0.0, 0.0); self.bins()];
        self.forward.process(&mut buf, &mut spec).expect("fft length");
        let wsum: f64 = self.window.iter().sum();
        let cal = 4.0 / (wsum * wsum);
        spec.iter().map(|z| z.norm_sqr() * cal).collect()
    }

    fn harmonic_envelope(&self, power: &[f64], f0: f64, fs: f64) -> Vec<f64> {
        let bin_hz = fs / self.fft_size as f64;
        let half_width = 0.5 * f0 / bin_hz;
        let nyq_bin = (self.bins() - 1) as f64;
        let mut knots: Vec<(f64, f64)> = Vec::new();
        let mut h = 1.0;
        while h * f0 < fs / 2.0 {
            let center = h * f0 / bin_hz;
            let lo = (center - half_width).ceil().max(0.0) as usize;
            let hi = ((center + half_width).floor().min(nyq_bin)) as usize;
            let peak = power[lo..=hi.max(lo)]
                .iter()
                .fold(SP_FLOOR, |m, &p| m.max(p));
            knots.push((center, peak.ln()));
            h += 1.0;
        }
        (0..self.bins())
            .map(|k| {
                let x = k as f64;
                let log = match knots.iter().position(|&(c, _)| c >= x) {
                    Some(0) => knots[0].1,
                    None => knots.last().map(|k| k.1).unwrap_or(SP_FLOOR.ln()),
                    Some(i) => {
                        let (x0, y0) = knots[i - 1];
                        let (x1, y1) = knots[i];
                        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
                    }
                };
                log.exp().max(SP_FLOOR)
            })
            .collect()
    }

    fn smoothed_envelope(power: &[f64]) -> Vec<f64> {
        let radius = 8isize;
        let n = power.len() as isize;
        (0..n)
            .map(|k| {
                let lo = (k - radius).max(0);
                let hi = (k + radius).min(n - 1);
                let s: f64 = (lo..=hi).map(|j| power[j as usize]).sum();
                (s / (hi - lo + 1) as f64).max(SP_FLOOR)
            })
            .collect()
    }
}

fn interp_bin(row: &[f64], bin: f64) -> f64 {
    let last = row.len() - 1;
    if bin <= 0.0 {
        return row[0];
    }
    if bin >= last as f64 {
        return row[last];
    }
    let i = bin.floor() as usize;
    let t = bin - i as f64;
    row[i] * (1.0 - t) + row[i + 1] * t
}

impl Vocoder for ToyVocoder {
    fn name(&self) -> &'static str {
        "toy"
    }

    fn fft_size(&self) -> usize {
        self.fft_size
    }

    fn analyze(&self, wave: &Waveform, frame_period_ms: f64) -> Result<Analysis> {
        if wave.is_empty() {
            return Err(EvcError::invalid("empty waveform"));
        }
        if !(frame_period_ms > 0.0) {
            return Err(EvcError::invalid("frame period must be positive"));
        }
        let fs = wave.sample_rate as f64;
        if fs / F0_MIN * 1.5 >= self.fft_size as f64 {
            return Err(EvcError::config(format!(
                "fft size {} too small for {} Hz audio",
                self.fft_size, wave.sample_rate
            )));
        }
        let frames = frame_count(wave.len(), wave.sample_rate, frame_period_ms);
        let hop = frame_period_ms * fs / 1000.0;
        let bins = self.bins();
        let mut f0 = vec![0.0; frames];
        let mut sp = Mat::zeros((frames, bins));
        let mut ap = Mat::ones((frames, bins));
        for i in 0..frames {
            let center = (i as f64 * hop).round() as usize;
            let seg = Self::segment(&wave.samples, center, self.fft_size);
            let (pitch, dip) = self.pitch(&seg, fs);
            let power = self.power_spectrum(&seg);
            let env = if pitch > 0.0 {
                ap.row_mut(i).fill(dip);
                self.harmonic_envelope(&power, pitch, fs)
            } else {
                Self::smoothed_envelope(&power)
            };
            f0[i] = pitch;
            sp.row_mut(i).assign(&ndarray::Array1::from(env));
        }
        Ok(Analysis { f0, sp, ap })
    }

    fn synthesize(
        &self,
        f0: &[f64],
        sp: &Mat,
        ap: &Mat,
        frame_period_ms: f64,
        sample_rate: u32,
    ) -> Result<Vec<f64>> {
        check_frames(f0, sp, ap, self.bins())?;
        if f0.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) {
            return Err(EvcError::invalid("f0 must be finite and non-negative"));
        }
        let fs = sample_rate as f64;
        let frames = f0.len();
        let len = synthesis_len(frames, sample_rate, frame_period_ms);
        let hop = frame_period_ms * fs / 1000.0;
        let bin_hz = fs / self.fft_size as f64;
        let mut out = vec![0.0; len];

        let sp_rows: Vec<Vec<f64>> = sp.rows().into_iter().map(|r| r.to_vec()).collect();
        let ap_rows: Vec<Vec<f64>> = ap.rows().into_iter().map(|r| r.to_vec()).collect();
        let amp = |i: usize, freq: f64| -> f64 {
            if f0[i] <= 0.0 {
                return 0.0;
            }
            let b = freq / bin_hz;
            let a = interp_bin(&ap_rows[i], b).clamp(0.0, 1.0);
            (interp_bin(&sp_rows[i], b).max(0.0) * (1.0 - a)).sqrt()
        };

        // Harmonic part.
        let mut phase = 0.0f64;
        for (n, y) in out.iter_mut().enumerate() {
            let pos = n as f64 / hop;
            let i0 = (pos.floor() as usize).min(frames - 1);
            let i1 = (i0 + 1).min(frames - 1);
            let t = (pos - i0 as f64).clamp(0.0, 1.0);
            let f = match (f0[i0] > 0.0, f0[i1] > 0.0) {
                (true, true) => f0[i0] * (1.0 - t) + f0[i1] * t,
                (true, false) => f0[i0],
                (false, true) => f0[i1],
                (false, false) => {
                    continue;
                }
            };
            phase += 2.0 * PI * f / fs;
            if phase > 2.0 * PI * 1e6 {
                phase %= 2.0 * PI;
            }
            let mut acc = 0.0;
            let mut h = 1.0;
            while h * f < fs / 2.0 {
                let a = (1.0 - t) * amp(i0, h * f) + t * amp(i1, h * f);
                if a > 0.0 {
                    acc += a * (h * phase).cos();
                }
                h += 1.0;
            }
            *y = acc;
        }

        // Aperiodic part: shaped white noise, overlap-added with Hann windows of 2 hops.
        let mut rng = ChaCha8Rng::seed_from_u64(NOISE_SEED);
        let n = self.fft_size;
        let ola = ((2.0 * hop).round() as usize).clamp(2, n);
        let ola_win: Vec<f64> = (0..ola)
            .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / ola as f64).cos())
            .collect();
        let noise_gain = (n as f64 / 6.0).sqrt();
        let mut buf = vec![0.0; n];
        let mut spec = vec![Complex::new(0.0, 0.0); self.bins()];
        for i in 0..frames {
            for v in buf.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            self.forward.process(&mut buf, &mut spec).expect("fft length");
            for (k, z) in spec.iter_mut().enumerate() {
                let a = ap_rows[i][k].clamp(0.0, 1.0);
                *z *= (sp_rows[i][k].max(0.0) * a).sqrt() * noise_gain / n as f64;
            }
            spec[0].im = 0.0;
            spec[self.bins() - 1].im = 0.0;
            self.inverse.process(&mut spec, &mut buf).expect("fft length");
            let start = (i as f64 * hop).round() as isize - (ola / 2) as isize;
            let offset = (n - ola) / 2;
            for k in 0..ola {
                let j = start + k as isize;
                if j >= 0 && (j as usize) < len {
                    out[j as usize] += buf[offset + k] * ola_win[k];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (16_000.0 * secs) as usize;
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin())
                .collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn silence_is_unvoiced() {
        let v = ToyVocoder::new(1024).unwrap();
        let a = v.analyze(&Waveform::new(vec![0.0; 16_000], 16_000).unwrap(), 5.0).unwrap();
        assert!(a.f0.iter().all(|&f| f == 0.0));
        assert_eq!(a.f0.len(), 201);
    }

    #[test]
    fn sine_pitch_and_envelope_calibration() {
        let v = ToyVocoder::new(1024).unwrap();
        let a = v.analyze(&sine(220.0, 1.0, 0.5), 5.0).unwrap();
        let t = a.f0.len();
        for &f in &a.f0[20..t - 20] {
            assert!((f - 220.0).abs() / 220.0 < 0.03, "f0 {f}");
        }
        let bin = 220.0 * 1024.0 / 16_000.0;
        let env = interp_bin(&a.sp.row(100).to_vec(), bin);
        assert!((env.sqrt() - 0.5).abs() < 0.1, "amplitude {}", env.sqrt());
    }

    #[test]
    fn synthesis_length_contract() {
        let v = ToyVocoder::new(1024).unwrap();
        let f0 = vec![0.0; 200];
        let y = v
            .synthesize(&f0, &Mat::from_elem((200, 513), 1e-12), &Mat::ones((200, 513)), 5.0, 16_000)
            .unwrap();
        assert_eq!(y.len(), 16_000);
        assert!(y.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn mismatched_frames_rejected() {
        let v = ToyVocoder::new(1024).unwrap();
        let err = v.synthesize(&[100.0; 3], &Mat::ones((4, 513)), &Mat::ones((3, 513)), 5.0, 16_000);
        assert!(matches!(err, Err(EvcError::InvalidInput(_))));
    }
}
