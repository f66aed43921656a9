//! Mel-cepstral analysis of spectral envelopes by all-pass frequency warping.
//!
//! The cepstrum of the log power envelope is computed with an inverse FFT, its
//! zeroth coefficient halved, and then warped with the all-pass recursion
//! (`freqt`). The inverse runs the recursion with `-alpha` to a long cepstrum,
//! doubles coefficient 0 and evaluates the log spectrum with a forward FFT.
//! Under this convention scaling an envelope by `k` moves only coefficient 0, by
//! `ln(k) / 2`. Natural logarithms throughout.

use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{EvcError, Result};
use crate::tape::Mat;

pub const DEFAULT_ORDER: usize = 36;
pub const DEFAULT_ALPHA: f64 = 0.42;

/// All-pass frequency warping of a cepstrum to `out_len` coefficients.
pub fn freqt(c: &[f64], out_len: usize, alpha: f64) -> Vec<f64> {
    let b = 1.0 - alpha * alpha;
    let mut cur = vec![0.0; out_len];
    let mut prev = vec![0.0; out_len];
    for &ci in c.iter().rev() {
        std::mem::swap(&mut cur, &mut prev);
        if out_len == 0 {
            continue;
        }
        cur[0] = ci + alpha * prev[0];
        if out_len > 1 {
            cur[1] = b * prev[0] + alpha * prev[1];
        }
        for j in 2..out_len {
            cur[j] = prev[j - 1] + alpha * (prev[j] - cur[j - 1]);
        }
    }
    cur
}

/// Planned transforms for one FFT size.
pub struct MelCepstrum {
    fft_size: usize,
    order: usize,
    alpha: f64,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl MelCepstrum {
    pub fn new(fft_size: usize, order: usize, alpha: f64) -> Result<Self> {
        if fft_size < 4 || fft_size % 2 != 0 {
            return Err(EvcError::invalid(format!("fft size {fft_size} must be even and >= 4")));
        }
        if order == 0 || order > fft_size / 2 {
            return Err(EvcError::invalid(format!("cepstral order {order} out of range")));
        }
        if !(alpha.abs() < 1.0) {
            return Err(EvcError::invalid(format!("warping constant {alpha} must satisfy |alpha| < 1")));
        }
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(MelCepstrum {
            fft_size,
            order,
            alpha,
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// One envelope frame (length `fft_size / 2 + 1`) to `order` mel-cepstral coefficients.
    pub fn frame_to_mcep(&self, sp: &[f64]) -> Result<Vec<f64>> {
        if sp.len() != self.bins() {
            return Err(EvcError::invalid(format!(
                "envelope has {} bins, expected {}",
                sp.len(),
                self.bins()
            )));
        }
        let mut spec: Vec<Complex<f64>> = Vec::with_capacity(sp.len());
        for &p in sp {
            if !(p > 0.0) || !p.is_finite() {
                return Err(EvcError::invalid(format!("envelope values must be positive, found {p}")));
            }
            spec.push(Complex::new(p.ln(), 0.0));
        }
        let mut cep = vec![0.0; self.fft_size];
        self.inverse
            .process(&mut spec, &mut cep)
            .map_err(|e| EvcError::invalid(e.to_string()))?;
        let n = self.fft_size as f64;
        let half = self.fft_size / 2;
        let mut c: Vec<f64> = cep[..=half].iter().map(|x| x / n).collect();
        c[0] /= 2.0;
        Ok(freqt(&c, self.order, self.alpha))
    }

    /// Inverse of [`MelCepstrum::frame_to_mcep`]; always strictly positive.
    pub fn mcep_to_frame(&self, mc: &[f64]) -> Result<Vec<f64>> {
        if let Some(x) = mc.iter().find(|x| !x.is_finite()) {
            return Err(EvcError::invalid(format!("non-finite mel-cepstral coefficient {x}")));
        }
        let half = self.fft_size / 2;
        let mut c = freqt(mc, half + 1, -self.alpha);
        c[0] *= 2.0;
        let mut sym = vec![0.0; self.fft_size];
        sym[0] = c[0];
        for n in 1..half {
            sym[n] = c[n];
            sym[self.fft_size - n] = c[n];
        }
        sym[half] = c[half];
        let mut spec = vec![Complex::new(0.0, 0.0); self.bins()];
        self.forward
            .process(&mut sym, &mut spec)
            .map_err(|e| EvcError::invalid(e.to_string()))?;
        Ok(spec.iter().map(|z| z.re.exp().max(f64::MIN_POSITIVE)).collect())
    }

    pub fn sp_to_mcep(&self, sp: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros((sp.nrows(), self.order));
        for (i, row) in sp.rows().into_iter().enumerate() {
            let mc = self.frame_to_mcep(&row.to_vec())?;
            out.row_mut(i).assign(&ndarray::Array1::from(mc));
        }
        Ok(out)
    }

    pub fn mcep_to_sp(&self, mcep: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros((mcep.nrows(), self.bins()));
        for (i, row) in mcep.rows().into_iter().enumerate() {
            let sp = self.mcep_to_frame(&row.to_vec())?;
            out.row_mut(i).assign(&ndarray::Array1::from(sp));
        }
        Ok(out)
    }
}

/// Envelope frames to mel-cepstra with a one-off plan.
pub fn sp_to_mcep(sp: &Mat, order: usize, alpha: f64) -> Result<Mat> {
    if sp.ncols() < 3 {
        return Err(EvcError::invalid("envelope needs at least 3 bins"));
    }
    MelCepstrum::new((sp.ncols() - 1) * 2, order, alpha)?.sp_to_mcep(sp)
}

pub fn mcep_to_sp(mcep: &Mat, fft_size: usize, alpha: f64) -> Result<Mat> {
    MelCepstrum::new(fft_size, mcep.ncols(), alpha)?.mcep_to_sp(mcep)
}
