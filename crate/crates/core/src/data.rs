//! Normalisation statistics, chunk cropping and batch assembly for mel-cepstra.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvcError, Result};
use crate::tape::Mat;

const STD_FLOOR: f64 = 1e-8;

/// Per-dimension z-score statistics from training frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub config_hash: String,
}

impl NormStats {
    pub fn fit<'a>(mceps: impl IntoIterator<Item = &'a Mat>, config_hash: &str) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in mceps {
            if sum.is_empty() {
                sum = vec![0.0; m.ncols()];
                sq = vec![0.0; m.ncols()];
            }
            if m.ncols() != sum.len() {
                return Err(EvcError::data("mel-cepstra have inconsistent orders"));
            }
            for row in m.rows() {
                for (d, &x) in row.iter().enumerate() {
                    sum[d] += x;
                    sq[d] += x * x;
                }
            }
            n += m.nrows();
        }
        if n == 0 {
            return Err(EvcError::stats("no frames to compute normalisation statistics"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats {
            mean,
            std,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &Mat) -> Result<()> {
        if m.ncols() != self.dims() {
            return Err(EvcError::invalid(format!(
                "expected {} coefficients per frame, got {}",
                self.dims(),
                m.ncols()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, m: &Mat) -> Result<Mat> {
        self.check(m)?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (d, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[d]) / self.std[d];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, m: &Mat) -> Result<Mat> {
        self.check(m)?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (d, x) in row.iter_mut().enumerate() {
                *x = *x * self.std[d] + self.mean[d];
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::archive::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EvcError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| EvcError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Reflect-pads rows at the end until there are at least `len` of them.
pub fn reflect_pad(m: &Mat, len: usize) -> Mat {
    let t = m.nrows();
    assert!(t > 0, "cannot pad an empty sequence");
    if t >= len {
        return m.clone();
    }
    let period = if t == 1 { 1 } else { 2 * (t - 1) };
    Mat::from_shape_fn((len, m.ncols()), |(i, d)| {
        let k = i % period;
        let src = if k < t { k } else { period - k };
        m[[src, d]]
    })
}

/// A random window of `len` consecutive frames; shorter inputs are reflect-padded first.
pub fn random_crop(m: &Mat, len: usize, rng: &mut impl Rng) -> Mat {
    let padded = reflect_pad(m, len);
    let start = rng.gen_range(0..=padded.nrows() - len);
    padded.slice(ndarray::s![start..start + len, ..]).to_owned()
}

/// Stacks equal-length chunks into `(batch * len, dims)`.
pub fn stack(chunks: &[Mat]) -> Mat {
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("chunks share width")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_roundtrip() {
        let a = Mat::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64 * 0.7 - 2.0);
        let s = NormStats::fit([&a], "h").unwrap();
        let z = s.normalize(&a).unwrap();
        for d in 0..3 {
            let col = z.column(d);
            assert!(col.mean().unwrap().abs() < 1e-12);
        }
        let back = s.denormalize(&z).unwrap();
        assert!(back.iter().zip(a.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn reflect_pad_pattern() {
        let m = Mat::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        let p = reflect_pad(&m, 8);
        assert_eq!(p.column(0).to_vec(), vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0]);
        let one = reflect_pad(&Mat::from_elem((1, 2), 5.0), 3);
        assert_eq!(one, Mat::from_elem((3, 2), 5.0));
    }

    #[test]
    fn crop_is_contiguous() {
        let m = Mat::from_shape_fn((50, 2), |(i, _)| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_crop(&m, 16, &mut rng);
        let s = c[[0, 0]];
        assert!((0..16).all(|i| c[[i, 0]] == s + i as f64));
    }
}
