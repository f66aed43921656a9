//! Mel-cepstral distortion with DTW frame alignment.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{EvcError, Result};
use crate::tape::Mat;

/// `10 / ln 10 * sqrt(2)`: the distortion of one frame pair that differs by 1 in one coefficient.
pub fn mcd_constant() -> f64 {
    10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2
}

fn euclid(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Alignment result: the index pairs from `(0, 0)` to `(T1 - 1, T2 - 1)` and the summed local distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Dynamic time warping with steps (1,0), (0,1), (1,1), all with unit weight,
/// and Euclidean local distance. Ties favour the diagonal step.
pub fn dtw_align(a: &Mat, b: &Mat) -> Result<Alignment> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(EvcError::invalid("DTW needs non-empty sequences"));
    }
    if a.ncols() != b.ncols() {
        return Err(EvcError::invalid("DTW sequences must share their dimension"));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = euclid(a.row(i), b.row(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[at(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[at(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[at(i, j)] = best + d;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let step = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[at(i - 1, j - 1)];
            let up = acc[at(i - 1, j)];
            let left = acc[at(i, j - 1)];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        (i, j) = step;
        path.push(step);
    }
    path.reverse();
    Ok(Alignment {
        path,
        cost: acc[at(n - 1, m - 1)],
    })
}

/// Which coefficients enter the distortion and whether frames are DTW-aligned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McdSettings {
    pub first_dim: usize,
    pub last_dim: usize,
    pub dtw: bool,
}

impl Default for McdSettings {
    fn default() -> Self {
        McdSettings {
            first_dim: 1,
            last_dim: 35,
            dtw: true,
        }
    }
}

impl McdSettings {
    pub fn from_config(e: &crate::config::EvalConfig) -> Self {
        McdSettings {
            first_dim: e.mcd_first_dim,
            last_dim: e.mcd_last_dim,
            dtw: e.mcd_dtw,
        }
    }

    pub fn method_tag(&self) -> String {
        let align = if self.dtw { "dtw-euclidean" } else { "framewise" };
        format!("{align}/c{}-c{}", self.first_dim, self.last_dim)
    }
}

fn frame_distortion(a: ArrayView1<f64>, b: ArrayView1<f64>, s: &McdSettings) -> f64 {
    let sq: f64 = (s.first_dim..=s.last_dim).map(|d| (a[d] - b[d]).powi(2)).sum();
    10.0 / std::f64::consts::LN_10 * (2.0 * sq).sqrt()
}

/// Mean per-frame distortion in dB. With DTW off the sequences must have equal length.
pub fn mcd(reference: &Mat, converted: &Mat, s: &McdSettings) -> Result<f64> {
    if reference.nrows() == 0 || converted.nrows() == 0 {
        return Err(EvcError::invalid("MCD needs non-empty sequences"));
    }
    if reference.ncols() != converted.ncols() || s.last_dim >= reference.ncols() || s.first_dim > s.last_dim {
        return Err(EvcError::invalid(format!(
            "MCD over c{}..=c{} needs matching widths > {}, got {} and {}",
            s.first_dim,
            s.last_dim,
            s.last_dim,
            reference.ncols(),
            converted.ncols()
        )));
    }
    let pairs: Vec<(usize, usize)> = if s.dtw {
        let sub = |m: &Mat| m.slice(ndarray::s![.., s.first_dim..=s.last_dim]).to_owned();
        dtw_align(&sub(reference), &sub(converted))?.path
    } else {
        if reference.nrows() != converted.nrows() {
            return Err(EvcError::invalid("framewise MCD needs equal lengths"));
        }
        (0..reference.nrows()).map(|i| (i, i)).collect()
    };
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| frame_distortion(reference.row(i), converted.row(j), s))
        .sum();
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMcd {
    pub reference: String,
    pub converted: String,
    pub source_emotion: String,
    pub target_emotion: String,
    pub mcd_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McdReport {
    pub method: String,
    pub pairs: BTreeMap<String, f64>,
    pub overall: f64,
    pub utterances: Vec<UtteranceMcd>,
    pub config_hash: String,
}

impl McdReport {
    pub fn from_utterances(utterances: Vec<UtteranceMcd>, s: &McdSettings, config_hash: &str) -> Result<Self> {
        if utterances.is_empty() {
            return Err(EvcError::data("no converted utterances to evaluate"));
        }
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for u in &utterances {
            groups
                .entry(crate::f0::pair_key(&u.source_emotion, &u.target_emotion))
                .or_default()
                .push(u.mcd_db);
        }
        let pairs = groups
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let overall = utterances.iter().map(|u| u.mcd_db).sum::<f64>() / utterances.len() as f64;
        Ok(McdReport {
            method: s.method_tag(),
            pairs,
            overall,
            utterances,
            config_hash: config_hash.to_string(),
        })
    }
}
