//! Test-time conversion of whole utterances between emotions.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::config::EnergyMode;
use crate::data::NormStats;
use crate::embedding::ClassMeans;
use crate::error::{EvcError, Result};
use crate::f0::{lgnt_convert, F0StatsDocument};
use crate::features::{CorpusManifest, FeatureExtractor, ManifestEntry, UtteranceFeatures};
use crate::stargan::{load_checkpoint, StarGan, StarGanParams};

pub const BUNDLE_CLASSIFIER: &str = "classifier.ckpt";
pub const BUNDLE_CLASS_MEANS: &str = "class_means.arc";
pub const BUNDLE_NORM: &str = "norm_stats.json";
pub const BUNDLE_F0: &str = "f0_stats.json";
pub const BUNDLE_STAGE1: &str = "stage1.ckpt";
pub const BUNDLE_STAGE2: &str = "stage2.ckpt";

/// Everything conversion needs, loaded from one directory.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub gan: StarGan,
    pub params: StarGanParams,
    pub means: ClassMeans,
    pub norm: NormStats,
    pub f0: F0StatsDocument,
    pub energy: EnergyMode,
    pub config_hash: String,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(EvcError::config(format!("model bundle {} lacks `{name}`", dir.display())));
    }
    Ok(p)
}

impl ModelBundle {
    /// Loads the stage-2 generator with its class means, normalisation and F0 statistics.
    /// All artifacts must record the same configuration hash.
    pub fn load(dir: &Path, energy: EnergyMode) -> Result<Self> {
        let (gan, params, meta) = load_checkpoint(&require(dir, BUNDLE_STAGE2)?)?;
        let (means, means_hash) = ClassMeans::load(&require(dir, BUNDLE_CLASS_MEANS)?)?;
        let norm = NormStats::load(&require(dir, BUNDLE_NORM)?)?;
        let f0 = F0StatsDocument::load(&require(dir, BUNDLE_F0)?)?;
        for (what, h) in [
            ("class means", &means_hash),
            ("normalisation statistics", &norm.config_hash),
            ("F0 statistics", &f0.config_hash),
        ] {
            if *h != meta.config_hash {
                return Err(EvcError::config(format!(
                    "{what} in {} were produced with a different configuration ({} vs {})",
                    dir.display(),
                    short(h),
                    short(&meta.config_hash)
                )));
            }
        }
        if means.labels != f0.labels {
            return Err(EvcError::config("class means and F0 statistics disagree on the label set"));
        }
        Ok(ModelBundle {
            gan,
            params,
            means,
            norm,
            f0,
            energy,
            config_hash: meta.config_hash,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.means.labels
    }

    fn check_label(&self, l: &str) -> Result<()> {
        if self.labels().iter().any(|x| x == l) {
            Ok(())
        } else {
            Err(EvcError::config(format!("unknown emotion label `{l}`")))
        }
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Converts analysed features: mel-cepstra through the generator conditioned on
/// the target class mean, F0 through the relative LGNT, aperiodicity unchanged.
pub fn convert_features(
    bundle: &ModelBundle,
    extractor: &FeatureExtractor,
    feats: &UtteranceFeatures,
    source: &str,
    target: &str,
) -> Result<UtteranceFeatures> {
    bundle.check_label(source)?;
    bundle.check_label(target)?;
    let mcep = feats.mcep()?;
    let z = bundle.norm.normalize(mcep)?;
    let y = crate::stargan::convert(&bundle.gan, &bundle.params.gen, &z, bundle.means.get(target)?)?;
    let mut mc = bundle.norm.denormalize(&y)?;
    if bundle.energy == EnergyMode::CopySource {
        mc.column_mut(0).assign(&mcep.column(0));
    }
    let sp = extractor.mel_cepstrum().mcep_to_sp(&mc)?;
    let f0 = lgnt_convert(&feats.f0, bundle.f0.deltas.get(source, target)?, bundle.f0.spread);
    if let Some(w) = &f0.warning {
        warn!("{}: {w}", feats.utterance_id);
    }
    Ok(UtteranceFeatures {
        utterance_id: feats.utterance_id.clone(),
        speaker_id: feats.speaker_id.clone(),
        emotion: target.to_string(),
        sample_rate: feats.sample_rate,
        frame_period_ms: feats.frame_period_ms,
        f0: f0.f0,
        sp,
        ap: feats.ap.clone(),
        mcep: Some(mc),
    })
}

/// Replaces non-finite samples by zero and clips to `[-1, 1]`.
pub fn clip_guard(samples: &mut [f64]) {
    for s in samples {
        *s = if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 };
    }
}

/// Full conversion of one waveform. Returns the synthesised audio and the converted features.
pub fn convert_utterance(
    bundle: &ModelBundle,
    extractor: &FeatureExtractor,
    wave: &Waveform,
    source: &str,
    target: &str,
) -> Result<(Waveform, UtteranceFeatures)> {
    let feats = extractor.extract(wave, "input", "unknown", source)?;
    let converted = convert_features(bundle, extractor, &feats, source, target)?;
    let mut out = extractor.synthesize(&converted)?;
    clip_guard(&mut out.samples);
    Ok((out, converted))
}

/// A line of the conversion index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub source_path: PathBuf,
    pub source_emotion: String,
    pub target_emotion: String,
    pub output_path: PathBuf,
}

/// Parses `angry:sad,sad:happy`.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| EvcError::config(format!("emotion pair `{p}` must look like source:target")))?;
            Ok((a.trim().to_string(), b.trim().to_string()))
        })
        .collect()
}

pub fn output_name(entry: &ManifestEntry, target: &str) -> String {
    format!("{}__{}-to-{}.wav", entry.utterance_id(), entry.emotion, target)
}

/// Converts every entry whose emotion is the source of some pair. Writes
/// `<out_dir>/<id>__<src>-to-<tgt>.wav` and `<out_dir>/index.csv`.
pub fn convert_corpus(
    bundle: &ModelBundle,
    extractor: &FeatureExtractor,
    manifest: &CorpusManifest,
    entries: &[&ManifestEntry],
    pairs: &[(String, String)],
    out_dir: &Path,
) -> Result<Vec<IndexRow>> {
    for (a, b) in pairs {
        bundle.check_label(a)?;
        bundle.check_label(b)?;
    }
    fs::create_dir_all(out_dir)?;
    let jobs: Vec<(&ManifestEntry, &str)> = entries
        .iter()
        .flat_map(|e| {
            pairs
                .iter()
                .filter(move |(s, _)| *s == e.emotion)
                .map(move |(_, t)| (*e, t.as_str()))
        })
        .collect();
    let rows: Vec<IndexRow> = jobs
        .par_iter()
        .map(|&(e, target)| {
            let src = manifest.resolve(e);
            let wave = Waveform::read_wav(&src)?;
            let (out, _) = convert_utterance(bundle, extractor, &wave, &e.emotion, target)?;
            let path = out_dir.join(output_name(e, target));
            out.write_wav(&path)?;
            Ok(IndexRow {
                source_path: src,
                source_emotion: e.emotion.clone(),
                target_emotion: target.to_string(),
                output_path: path,
            })
        })
        .collect::<Result<_>>()?;
    write_index(&out_dir.join("index.csv"), &rows)?;
    info!("converted {} utterances into {}", rows.len(), out_dir.display());
    Ok(rows)
}

pub fn write_index(path: &Path, rows: &[IndexRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["source_path", "source_emotion", "target_emotion", "output_path"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| EvcError::data(e.to_string()))?;
    crate::archive::write_atomic(path, &bytes)
}

pub fn read_index(path: &Path) -> Result<Vec<IndexRow>> {
    let file = fs::File::open(path).map_err(|e| EvcError::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(csv::Reader::from_reader(file).deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_parsing() {
        assert_eq!(
            parse_pairs("angry:sad, sad:happy").unwrap(),
            vec![("angry".into(), "sad".into()), ("sad".into(), "happy".into())]
        );
        assert!(parse_pairs("").unwrap().is_empty());
        assert!(parse_pairs("angry-sad").is_err());
    }

    #[test]
    fn clip_guard_bounds() {
        let mut s = vec![2.0, -3.0, f64::NAN, 0.5];
        clip_guard(&mut s);
        assert_eq!(s, vec![1.0, -1.0, 0.0, 0.5]);
    }

    #[test]
    fn index_roundtrip() {
        let d = tempfile::tempdir().unwrap();
        let rows = vec![IndexRow {
            source_path: "a.wav".into(),
            source_emotion: "sad".into(),
            target_emotion: "happy".into(),
            output_path: "b.wav".into(),
        }];
        let p = d.path().join("i.csv");
        write_index(&p, &rows).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("source_path,source_emotion,target_emotion,output_path"));
        assert_eq!(read_index(&p).unwrap(), rows);
        write_index(&p, &[]).unwrap();
        assert!(read_index(&p).unwrap().is_empty());
    }
}
