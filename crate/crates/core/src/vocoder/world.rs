//! Binding to the WORLD vocoder (DIO + StoneMask, CheapTrick, D4C, Synthesis).

use std::mem::MaybeUninit;
use std::sync::Mutex;

use rsworld_sys::{
    CheapTrickOption, D4COption, DioOption, GetFFTSizeForCheapTrick, InitializeCheapTrickOption,
    InitializeD4COption, InitializeDioOption,
};

use super::{check_frames, Analysis, Vocoder};
use crate::audio::Waveform;
use crate::error::{EvcError, Result};
use crate::tape::Mat;

const D4C_FLOOR: f64 = 0.001;

// WORLD keeps its noise generator in C globals and reseeds it on every call,
// so calls must not interleave across threads.
static WORLD_LOCK: Mutex<()> = Mutex::new(());

fn world_guard() -> std::sync::MutexGuard<'static, ()> {
    WORLD_LOCK.lock().unwrap_or_else(|p| p.into_inner())
}

pub struct WorldVocoder {
    sample_rate: u32,
    fft_size: usize,
}

fn cheaptrick_option(fs: i32) -> CheapTrickOption {
    let mut opt = MaybeUninit::<CheapTrickOption>::uninit();
    // SAFETY: InitializeCheapTrickOption writes every field, including fft_size.
    unsafe {
        InitializeCheapTrickOption(fs, opt.as_mut_ptr());
        let mut opt = opt.assume_init();
        GetFFTSizeForCheapTrick(fs, &mut opt);
        opt
    }
}

fn dio_option(frame_period_ms: f64) -> DioOption {
    let mut opt = MaybeUninit::<DioOption>::uninit();
    // SAFETY: InitializeDioOption writes every field.
    let mut opt = unsafe {
        InitializeDioOption(opt.as_mut_ptr());
        opt.assume_init()
    };
    opt.frame_period = frame_period_ms;
    opt
}

fn d4c_option() -> D4COption {
    let mut opt = MaybeUninit::<D4COption>::uninit();
    // SAFETY: InitializeD4COption writes every field.
    unsafe {
        InitializeD4COption(opt.as_mut_ptr());
        opt.assume_init()
    }
}

fn rows_to_mat(rows: Vec<Vec<f64>>, bins: usize) -> Mat {
    let t = rows.len();
    Mat::from_shape_vec((t, bins), rows.into_iter().flatten().collect()).expect("rectangular")
}

impl WorldVocoder {
    /// `fft_size` must equal the size CheapTrick derives for `sample_rate`.
    pub fn new(sample_rate: u32, fft_size: usize) -> Result<Self> {
        let derived = cheaptrick_option(sample_rate as i32).fft_size as usize;
        if derived != fft_size {
            return Err(EvcError::config(format!(
                "WORLD uses fft size {derived} at {sample_rate} Hz, config asks for {fft_size}"
            )));
        }
        Ok(WorldVocoder {
            sample_rate,
            fft_size,
        })
    }

    fn err(message: impl Into<String>) -> EvcError {
        EvcError::Vocoder {
            adapter: "world",
            message: message.into(),
        }
    }
}

impl Vocoder for WorldVocoder {
    fn name(&self) -> &'static str {
        "world"
    }

    fn fft_size(&self) -> usize {
        self.fft_size
    }

    fn analyze(&self, wave: &Waveform, frame_period_ms: f64) -> Result<Analysis> {
        if wave.is_empty() {
            return Err(EvcError::invalid("empty waveform"));
        }
        if wave.sample_rate != self.sample_rate {
            return Err(EvcError::invalid(format!(
                "expected {} Hz audio, got {} Hz",
                self.sample_rate, wave.sample_rate
            )));
        }
        if !(frame_period_ms >= 1.0) {
            return Err(Self::err(format!("frame period {frame_period_ms} ms too small")));
        }
        let fs = wave.sample_rate as i32;
        let x = wave.samples.clone();
        let guard = world_guard();
        let (tpos, raw_f0) = rsworld::dio(&x, fs, &dio_option(frame_period_ms));
        let f0 = rsworld::stonemask(&x, fs, &tpos, &raw_f0);
        let sp = rsworld::cheaptrick(&x, fs, &tpos, &f0, &mut cheaptrick_option(fs));
        let ap = rsworld::d4c(&x, fs, &tpos, &f0, &d4c_option());
        drop(guard);
        let bins = self.fft_size / 2 + 1;
        if sp.len() != f0.len() || ap.len() != f0.len() {
            return Err(Self::err("analysis produced inconsistent frame counts"));
        }
        let sp = rows_to_mat(sp, bins);
        if sp.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Self::err("CheapTrick produced a non-positive envelope"));
        }
        // D4C yields NaN on perfectly periodic input; treat it as fully periodic.
        let ap = rows_to_mat(ap, bins).mapv(|v| if v.is_finite() { v.clamp(D4C_FLOOR, 1.0) } else { D4C_FLOOR });
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
        check_frames(f0, sp, ap, self.fft_size / 2 + 1)?;
        if frame_period_ms.fract() != 0.0 {
            return Err(Self::err("WORLD synthesis binding supports integer frame periods only"));
        }
        let to_rows = |m: &Mat| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let guard = world_guard();
        let y = rsworld::synthesis(
            &f0.to_vec(),
            &to_rows(sp),
            &to_rows(ap),
            frame_period_ms,
            sample_rate as i32,
        );
        drop(guard);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Self::err("synthesis produced non-finite samples"));
        }
        Ok(y)
    }
}
