//! Log-F0 statistics per emotion and the relative logarithm Gaussian
//! normalised transformation (LGNT) between emotions.
//!
//! For an utterance with voiced log-F0 mean `mu` and spread `sigma`, and the
//! class-pair deltas `dmu`, `dsigma` for `C1 -> C2`:
//!
//! ```text
//! ln f0' = (ln f0 - mu) * (sigma + dsigma) / sigma + mu + dmu
//! ```
//!
//! Unvoiced frames (`f0 = 0`) pass through untouched. Spread is the population
//! standard deviation by default; the literal "variance" reading is available
//! through [`Spread::Variance`].

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{EvcError, Result};

/// Below this utterance spread only the mean shift is applied.
pub const SIGMA_GUARD: f64 = 1e-6;
/// Scale factor used when `sigma + dsigma` would be negative.
pub const NEGATIVE_SPREAD_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    CorpusLevel,
    PerSpeaker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spread {
    Std,
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogF0Stats {
    pub mu: f64,
    pub sigma: f64,
}

fn spread_of(values: &[f64], mu: f64, spread: Spread) -> f64 {
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / values.len() as f64;
    match spread {
        Spread::Std => var.sqrt(),
        Spread::Variance => var,
    }
}

fn stats_of(values: &[f64], spread: Spread) -> Option<LogF0Stats> {
    if values.is_empty() {
        return None;
    }
    let mu = values.iter().sum::<f64>() / values.len() as f64;
    Some(LogF0Stats {
        mu,
        sigma: spread_of(values, mu, spread),
    })
}

fn voiced_logs(f0: &[f64]) -> Vec<f64> {
    f0.iter().filter(|&&f| f > 0.0).map(|f| f.ln()).collect()
}

/// Mean and spread of `ln f0` over voiced frames; `None` when nothing is voiced.
pub fn log_f0_stats(f0: &[f64], spread: Spread) -> Option<LogF0Stats> {
    stats_of(&voiced_logs(f0), spread)
}

/// Per-class (and per speaker/class) log-F0 statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionF0Stats {
    pub grouping: Grouping,
    pub spread: Spread,
    pub labels: Vec<String>,
    pub classes: BTreeMap<String, LogF0Stats>,
    pub per_speaker: BTreeMap<String, BTreeMap<String, LogF0Stats>>,
}

/// One utterance's contour with its labels.
#[derive(Clone, Copy, Debug)]
pub struct LabeledContour<'a> {
    pub speaker: &'a str,
    pub emotion: &'a str,
    pub f0: &'a [f64],
}

/// Statistics over voiced frames of the given contours.
///
/// Fails with a stats error naming any label that has no voiced frame.
pub fn compute_class_stats<'a>(
    contours: impl IntoIterator<Item = LabeledContour<'a>>,
    labels: &[String],
    grouping: Grouping,
    spread: Spread,
) -> Result<EmotionF0Stats> {
    let mut by_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut by_speaker: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for c in contours {
        if !labels.iter().any(|l| l == c.emotion) {
            return Err(EvcError::config(format!("unknown emotion label `{}`", c.emotion)));
        }
        let logs = voiced_logs(c.f0);
        by_speaker
            .entry(c.speaker)
            .or_default()
            .entry(c.emotion)
            .or_default()
            .extend_from_slice(&logs);
        by_class.entry(c.emotion).or_default().extend(logs);
    }
    let mut classes = BTreeMap::new();
    for label in labels {
        let values = by_class.get(label.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let s = stats_of(values, spread).ok_or_else(|| {
            EvcError::stats(format!("emotion `{label}` has no voiced frames in the training data"))
        })?;
        classes.insert(label.clone(), s);
    }
    let per_speaker = by_speaker
        .into_iter()
        .map(|(spk, m)| {
            let inner = m
                .into_iter()
                .filter_map(|(emo, v)| stats_of(&v, spread).map(|s| (emo.to_string(), s)))
                .collect();
            (spk.to_string(), inner)
        })
        .collect();
    Ok(EmotionF0Stats {
        grouping,
        spread,
        labels: labels.to_vec(),
        classes,
        per_speaker,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub dmu: f64,
    pub dsigma: f64,
}

impl PairDelta {
    pub const IDENTITY: PairDelta = PairDelta {
        dmu: 0.0,
        dsigma: 0.0,
    };
}

/// Deltas for every ordered label pair, keyed `"C1->C2"`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionPairDelta {
    pub pairs: BTreeMap<String, PairDelta>,
}

pub fn pair_key(source: &str, target: &str) -> String {
    format!("{source}->{target}")
}

impl EmotionPairDelta {
    pub fn get(&self, source: &str, target: &str) -> Result<PairDelta> {
        self.pairs
            .get(&pair_key(source, target))
            .copied()
            .ok_or_else(|| EvcError::stats(format!("no F0 delta for `{source}` -> `{target}`")))
    }
}

/// Pairwise differences of class statistics.
///
/// Per-speaker grouping averages the per-speaker differences over speakers that
/// have both classes; pairs with no such speaker use the corpus-level difference.
pub fn compute_deltas(stats: &EmotionF0Stats) -> Result<EmotionPairDelta> {
    let mut pairs = BTreeMap::new();
    for c1 in &stats.labels {
        for c2 in &stats.labels {
            let s1 = stats.classes.get(c1).ok_or_else(|| EvcError::stats(format!("missing stats for `{c1}`")))?;
            let s2 = stats.classes.get(c2).ok_or_else(|| EvcError::stats(format!("missing stats for `{c2}`")))?;
            let delta = if c1 == c2 {
                PairDelta::IDENTITY
            } else {
                let speaker_diffs: Vec<PairDelta> = match stats.grouping {
                    Grouping::CorpusLevel => Vec::new(),
                    Grouping::PerSpeaker => stats
                        .per_speaker
                        .values()
                        .filter_map(|m| {
                            let a = m.get(c1)?;
                            let b = m.get(c2)?;
                            Some(PairDelta {
                                dmu: b.mu - a.mu,
                                dsigma: b.sigma - a.sigma,
                            })
                        })
                        .collect(),
                };
                if speaker_diffs.is_empty() {
                    if stats.grouping == Grouping::PerSpeaker {
                        warn!("no speaker has both `{c1}` and `{c2}`; using corpus-level delta");
                    }
                    PairDelta {
                        dmu: s2.mu - s1.mu,
                        dsigma: s2.sigma - s1.sigma,
                    }
                } else {
                    let n = speaker_diffs.len() as f64;
                    PairDelta {
                        dmu: speaker_diffs.iter().map(|d| d.dmu).sum::<f64>() / n,
                        dsigma: speaker_diffs.iter().map(|d| d.dsigma).sum::<f64>() / n,
                    }
                }
            };
            pairs.insert(pair_key(c1, c2), delta);
        }
    }
    Ok(EmotionPairDelta { pairs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LgntOutput {
    pub f0: Vec<f64>,
    pub warning: Option<String>,
}

/// Converts one contour with utterance statistics computed from its voiced frames.
pub fn lgnt_convert(f0: &[f64], delta: PairDelta, spread: Spread) -> LgntOutput {
    if delta.dmu == 0.0 && delta.dsigma == 0.0 {
        return LgntOutput {
            f0: f0.to_vec(),
            warning: None,
        };
    }
    let Some(LogF0Stats { mu, sigma }) = log_f0_stats(f0, spread) else {
        return LgntOutput {
            f0: f0.to_vec(),
            warning: Some("contour has no voiced frames; returned unchanged".into()),
        };
    };
    let (scale, warning) = if sigma < SIGMA_GUARD {
        (1.0, Some(format!("log-F0 spread {sigma:e} below guard; mean shift only")))
    } else if sigma + delta.dsigma < 0.0 {
        (
            NEGATIVE_SPREAD_SCALE,
            Some(format!(
                "target spread {} negative; scale clamped to {NEGATIVE_SPREAD_SCALE}",
                sigma + delta.dsigma
            )),
        )
    } else {
        ((sigma + delta.dsigma) / sigma, None)
    };
    let out = f0
        .iter()
        .map(|&f| {
            if f > 0.0 {
                ((f.ln() - mu) * scale + mu + delta.dmu).exp()
            } else {
                f
            }
        })
        .collect();
    if let Some(w) = &warning {
        warn!("{w}");
    }
    LgntOutput { f0: out, warning }
}

/// On-disk form: class entries at the top level next to `deltas` and `grouping`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0StatsDocument {
    #[serde(flatten)]
    pub classes: BTreeMap<String, LogF0Stats>,
    pub deltas: EmotionPairDelta,
    pub grouping: Grouping,
    pub spread: Spread,
    pub labels: Vec<String>,
    pub config_hash: String,
}

impl F0StatsDocument {
    pub fn new(stats: &EmotionF0Stats, deltas: EmotionPairDelta, config_hash: &str) -> Self {
        F0StatsDocument {
            classes: stats.classes.clone(),
            deltas,
            grouping: stats.grouping,
            spread: stats.spread,
            labels: stats.labels.clone(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::archive::write_atomic(path, text.as_bytes())
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
