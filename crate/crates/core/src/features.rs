//! Utterance-level acoustic features, the corpus manifest and the on-disk
//! feature cache.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::archive::{Archive, DType};
use crate::audio::Waveform;
use crate::config::DataConfig;
use crate::error::{EvcError, Result};
use crate::mcep::MelCepstrum;
use crate::tape::Mat;
use crate::vocoder::{make_vocoder, Vocoder};

/// Vocoder parameters of one utterance plus its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    pub speaker_id: String,
    pub emotion: String,
    pub sample_rate: u32,
    pub frame_period_ms: f64,
    pub f0: Vec<f64>,
    pub sp: Mat,
    pub ap: Mat,
    pub mcep: Option<Mat>,
}

impl UtteranceFeatures {
    pub fn frames(&self) -> usize {
        self.f0.len()
    }

    pub fn mcep(&self) -> Result<&Mat> {
        self.mcep
            .as_ref()
            .ok_or_else(|| EvcError::data(format!("utterance `{}` has no mel-cepstra", self.utterance_id)))
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.f0.len();
        if self.sp.nrows() != t || self.ap.nrows() != t {
            return Err(EvcError::data(format!(
                "`{}`: frame counts disagree (f0 {t}, sp {}, ap {})",
                self.utterance_id,
                self.sp.nrows(),
                self.ap.nrows()
            )));
        }
        if let Some(m) = &self.mcep {
            if m.nrows() != t {
                return Err(EvcError::data(format!(
                    "`{}`: mcep has {} frames, expected {t}",
                    self.utterance_id,
                    m.nrows()
                )));
            }
        }
        if self.f0.iter().any(|f| !(*f >= 0.0)) {
            return Err(EvcError::data(format!("`{}`: negative or NaN F0", self.utterance_id)));
        }
        if self.sp.iter().any(|s| !(*s > 0.0)) {
            return Err(EvcError::data(format!("`{}`: non-positive envelope", self.utterance_id)));
        }
        Ok(())
    }

    fn to_archive(&self, extra: serde_json::Value) -> Archive {
        let mut meta = json!({
            "utterance_id": self.utterance_id,
            "speaker": self.speaker_id,
            "emotion": self.emotion,
            "sample_rate": self.sample_rate,
            "frame_period_ms": self.frame_period_ms,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut a = Archive::new(meta);
        let f0 = Mat::from_shape_vec((self.f0.len(), 1), self.f0.clone()).expect("column shape");
        a.push("f0", DType::F32, f0);
        a.push("sp", DType::F32, self.sp.clone());
        a.push("ap", DType::F32, self.ap.clone());
        if let Some(m) = &self.mcep {
            a.push("mcep", DType::F32, m.clone());
        }
        a
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        let meta = &a.meta;
        let text = |k: &str| -> Result<String> {
            meta[k]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| EvcError::data(format!("feature record lacks `{k}`")))
        };
        let f0 = a.require("f0")?.iter().copied().collect();
        let sp_floor = f32::MIN_POSITIVE as f64;
        let out = UtteranceFeatures {
            utterance_id: text("utterance_id")?,
            speaker_id: text("speaker")?,
            emotion: text("emotion")?,
            sample_rate: meta["sample_rate"]
                .as_u64()
                .ok_or_else(|| EvcError::data("feature record lacks `sample_rate`"))? as u32,
            frame_period_ms: meta["frame_period_ms"]
                .as_f64()
                .ok_or_else(|| EvcError::data("feature record lacks `frame_period_ms`"))?,
            f0,
            sp: a.require("sp")?.mapv(|v| v.max(sp_floor)),
            ap: a.require("ap")?.clone(),
            mcep: a.get("mcep").cloned(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Vocoder plus mel-cepstral analysis at fixed settings.
pub struct FeatureExtractor {
    vocoder: Box<dyn Vocoder>,
    mcep: MelCepstrum,
    sample_rate: u32,
    frame_period_ms: f64,
}

impl FeatureExtractor {
    pub fn new(cfg: &DataConfig) -> Result<Self> {
        let vocoder = make_vocoder(cfg.vocoder, cfg.sample_rate, cfg.fft_size)?;
        Self::with_vocoder(vocoder, cfg)
    }

    pub fn with_vocoder(vocoder: Box<dyn Vocoder>, cfg: &DataConfig) -> Result<Self> {
        if vocoder.fft_size() != cfg.fft_size {
            return Err(EvcError::config(format!(
                "vocoder `{}` uses fft size {}, config says {}",
                vocoder.name(),
                vocoder.fft_size(),
                cfg.fft_size
            )));
        }
        Ok(FeatureExtractor {
            mcep: MelCepstrum::new(cfg.fft_size, cfg.mcep_order, cfg.mcep_alpha)?,
            vocoder,
            sample_rate: cfg.sample_rate,
            frame_period_ms: cfg.frame_period_ms,
        })
    }

    pub fn vocoder(&self) -> &dyn Vocoder {
        self.vocoder.as_ref()
    }

    pub fn mel_cepstrum(&self) -> &MelCepstrum {
        &self.mcep
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }

    /// Vocoder analysis; `mcep` is left empty.
    pub fn decompose(&self, wave: &Waveform, utterance_id: &str, speaker_id: &str, emotion: &str) -> Result<UtteranceFeatures> {
        if wave.is_empty() {
            return Err(EvcError::invalid("empty waveform"));
        }
        if wave.sample_rate != self.sample_rate {
            return Err(EvcError::invalid(format!(
                "sample rate {} Hz not supported (expected {} Hz)",
                wave.sample_rate, self.sample_rate
            )));
        }
        let a = self.vocoder.analyze(wave, self.frame_period_ms)?;
        let feats = UtteranceFeatures {
            utterance_id: utterance_id.to_string(),
            speaker_id: speaker_id.to_string(),
            emotion: emotion.to_string(),
            sample_rate: self.sample_rate,
            frame_period_ms: self.frame_period_ms,
            f0: a.f0,
            sp: a.sp,
            ap: a.ap,
            mcep: None,
        };
        feats.validate()?;
        Ok(feats)
    }

    /// Analysis followed by mel-cepstral conversion of the envelope.
    pub fn extract(&self, wave: &Waveform, utterance_id: &str, speaker_id: &str, emotion: &str) -> Result<UtteranceFeatures> {
        let mut f = self.decompose(wave, utterance_id, speaker_id, emotion)?;
        f.mcep = Some(self.mcep.sp_to_mcep(&f.sp)?);
        Ok(f)
    }

    pub fn synthesize(&self, feats: &UtteranceFeatures) -> Result<Waveform> {
        let samples = self.vocoder.synthesize(
            &feats.f0,
            &feats.sp,
            &feats.ap,
            feats.frame_period_ms,
            self.sample_rate,
        )?;
        Waveform::new(samples, self.sample_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "val", alias = "valid")]
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker: String,
    pub emotion: String,
    pub split: Split,
}

impl ManifestEntry {
    /// File stem, used as the cache key.
    pub fn utterance_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Labeled utterance list. Relative audio paths resolve against `base_dir`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(base_dir: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        CorpusManifest {
            base_dir: base_dir.into(),
            entries,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| EvcError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr.headers()?.clone();
        for want in ["path", "speaker", "emotion", "split"] {
            if !headers.iter().any(|h| h == want) {
                return Err(EvcError::data(format!(
                    "manifest {} lacks column `{want}`",
                    path.display()
                )));
            }
        }
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(CorpusManifest { base_dir, entries })
    }

    /// Writes the CSV with paths as stored.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        if self.entries.is_empty() {
            w.write_record(["path", "speaker", "emotion", "split"])?;
        }
        let bytes = w.into_inner().map_err(|e| EvcError::data(e.to_string()))?;
        crate::archive::write_atomic(path, &bytes)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Label membership (config error) and split/id uniqueness (data error).
    pub fn validate(&self, labels: &[String]) -> Result<()> {
        let mut ids: HashMap<String, &ManifestEntry> = HashMap::new();
        for e in &self.entries {
            if !labels.iter().any(|l| *l == e.emotion) {
                return Err(EvcError::config(format!(
                    "manifest entry {} has unknown emotion `{}` (labels: {})",
                    e.path.display(),
                    e.emotion,
                    labels.join(", ")
                )));
            }
            let id = e.utterance_id();
            if id.is_empty() {
                return Err(EvcError::data(format!("manifest path `{}` has no file name", e.path.display())));
            }
            if let Some(prev) = ids.insert(id.clone(), e) {
                if prev.path == e.path && prev.split != e.split {
                    return Err(EvcError::data(format!(
                        "{} appears in both {:?} and {:?} splits",
                        e.path.display(),
                        prev.split,
                        e.split
                    )));
                }
                return Err(EvcError::data(format!("duplicate utterance id `{id}` in manifest")));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub fn record_path(cache_dir: &Path, utterance_id: &str) -> PathBuf {
    cache_dir.join(format!("{utterance_id}.feat"))
}

fn settings_digest(cfg: &DataConfig) -> String {
    let s = json!({
        "sample_rate": cfg.sample_rate,
        "frame_period_ms": cfg.frame_period_ms,
        "fft_size": cfg.fft_size,
        "mcep_order": cfg.mcep_order,
        "mcep_alpha": cfg.mcep_alpha,
        "vocoder": cfg.vocoder,
    });
    hex::encode(Sha256::digest(s.to_string().as_bytes()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

enum Outcome {
    Written,
    Skipped,
}

fn ingest_one(
    extractor: &FeatureExtractor,
    manifest: &CorpusManifest,
    entry: &ManifestEntry,
    settings: &str,
    cache_dir: &Path,
) -> Result<Outcome> {
    let src = manifest.resolve(entry);
    let bytes = fs::read(&src).map_err(|e| EvcError::Load {
        path: src.clone(),
        message: e.to_string(),
    })?;
    let source_sha = hex::encode(Sha256::digest(&bytes));
    let id = entry.utterance_id();
    let out = record_path(cache_dir, &id);
    if out.exists() {
        if let Ok(existing) = Archive::read(&out) {
            let m = &existing.meta;
            if m["source_sha256"] == source_sha.as_str()
                && m["settings"] == settings
                && m["speaker"] == entry.speaker.as_str()
                && m["emotion"] == entry.emotion.as_str()
            {
                return Ok(Outcome::Skipped);
            }
        }
    }
    let wave = Waveform::read_wav(&src)?;
    let feats = extractor.extract(&wave, &id, &entry.speaker, &entry.emotion)?;
    let archive = feats.to_archive(json!({ "source_sha256": source_sha, "settings": settings }));
    archive.write_atomic(&out)?;
    Ok(Outcome::Written)
}

/// Analyses every manifest entry into `<cache_dir>/<utterance_id>.feat`.
///
/// Records whose source audio and settings are unchanged are skipped. Unreadable
/// or unanalysable entries are reported in [`IngestReport::failed`]; an unknown
/// emotion label aborts before any work.
pub fn ingest_corpus(manifest: &CorpusManifest, cfg: &DataConfig, cache_dir: &Path) -> Result<IngestReport> {
    manifest.validate(&cfg.labels)?;
    fs::create_dir_all(cache_dir)?;
    let extractor = FeatureExtractor::new(cfg)?;
    let settings = settings_digest(cfg);
    let results: Vec<(String, Result<Outcome>)> = manifest
        .entries
        .par_iter()
        .map(|e| (e.utterance_id(), ingest_one(&extractor, manifest, e, &settings, cache_dir)))
        .collect();
    let mut report = IngestReport::default();
    for (id, r) in results {
        match r {
            Ok(Outcome::Written) => report.written.push(id),
            Ok(Outcome::Skipped) => report.skipped.push(id),
            Err(e) => {
                warn!("ingest of `{id}` failed: {e}");
                report.failed.push((id, e.to_string()));
            }
        }
    }
    info!(
        "ingest: {} written, {} unchanged, {} failed",
        report.written.len(),
        report.skipped.len(),
        report.failed.len()
    );
    Ok(report)
}

/// Loads cached records for the manifest entries of one split, in manifest order.
pub fn load_split(manifest: &CorpusManifest, cache_dir: &Path, split: Split) -> Result<Vec<UtteranceFeatures>> {
    manifest
        .split(split)
        .map(|e| {
            let path = record_path(cache_dir, &e.utterance_id());
            debug!("loading {}", path.display());
            let f = UtteranceFeatures::load(&path)?;
            f.mcep()?;
            Ok(f)
        })
        .collect()
}

/// Groups utterance indices by emotion label.
pub fn by_emotion(utts: &[UtteranceFeatures]) -> BTreeMap<&str, Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in utts.iter().enumerate() {
        m.entry(u.emotion.as_str()).or_default().push(i);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocoder::VocoderKind;

    fn toy_cfg() -> DataConfig {
        DataConfig {
            vocoder: VocoderKind::Toy,
            ..DataConfig::default()
        }
    }

    fn sine(freq: f64, secs: f64) -> Waveform {
        let n = (16000.0 * secs) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn extract_shapes_and_invariants() {
        let fx = FeatureExtractor::new(&toy_cfg()).unwrap();
        let f = fx.extract(&sine(200.0, 0.5), "u", "s", "sad").unwrap();
        assert_eq!(f.frames(), crate::vocoder::frame_count(8000, 16000, 5.0));
        assert_eq!(f.mcep.as_ref().unwrap().ncols(), 36);
        f.validate().unwrap();
    }

    #[test]
    fn rejects_empty_and_wrong_rate() {
        let fx = FeatureExtractor::new(&toy_cfg()).unwrap();
        let empty = Waveform::new(vec![], 16000).unwrap();
        assert!(matches!(fx.decompose(&empty, "u", "s", "sad"), Err(EvcError::InvalidInput(_))));
        let w = Waveform::new(vec![0.0; 100], 22050).unwrap();
        assert!(matches!(fx.decompose(&w, "u", "s", "sad"), Err(EvcError::InvalidInput(_))));
    }

    #[test]
    fn record_roundtrip_is_f32_exact() {
        let fx = FeatureExtractor::new(&toy_cfg()).unwrap();
        let f = fx.extract(&sine(150.0, 0.3), "u1", "spk", "happy").unwrap();
        let a = f.to_archive(json!({}));
        let back = UtteranceFeatures::from_archive(&Archive::from_bytes(&a.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.utterance_id, "u1");
        assert_eq!(back.f0[10], f.f0[10] as f32 as f64);
        assert_eq!(back.mcep.unwrap()[[3, 4]], f.mcep.unwrap()[[3, 4]] as f32 as f64);
    }

    #[test]
    fn manifest_validation() {
        let labels: Vec<String> = ["angry", "sad", "happy"].map(String::from).to_vec();
        let e = |p: &str, emo: &str, split| ManifestEntry {
            path: p.into(),
            speaker: "s".into(),
            emotion: emo.into(),
            split,
        };
        let ok = CorpusManifest::new(".", vec![e("a.wav", "sad", Split::Train), e("b.wav", "happy", Split::Test)]);
        ok.validate(&labels).unwrap();
        let bad = CorpusManifest::new(".", vec![e("a.wav", "bored", Split::Train)]);
        assert!(matches!(bad.validate(&labels), Err(EvcError::Config(_))));
        let twice = CorpusManifest::new(".", vec![e("a.wav", "sad", Split::Train), e("a.wav", "sad", Split::Test)]);
        assert!(twice.validate(&labels).unwrap_err().to_string().contains("both"));
    }

    #[test]
    fn manifest_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = CorpusManifest::new(
            dir.path(),
            vec![ManifestEntry {
                path: "x/y.wav".into(),
                speaker: "s1".into(),
                emotion: "angry".into(),
                split: Split::Validation,
            }],
        );
        let p = dir.path().join("m.csv");
        m.write(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("path,speaker,emotion,split\n"));
        assert_eq!(CorpusManifest::read(&p).unwrap(), m);
    }

    #[test]
    fn empty_manifest_ingests_to_empty_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache");
        let r = ingest_corpus(&CorpusManifest::default(), &toy_cfg(), &cache).unwrap();
        assert_eq!(r, IngestReport::default());
        assert_eq!(fs::read_dir(&cache).unwrap().count(), 0);
    }

    #[test]
    fn ingest_records_failures_and_skips_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        sine(180.0, 0.4).write_wav(&dir.path().join("good.wav")).unwrap();
        let entries = vec![
            ManifestEntry {
                path: "good.wav".into(),
                speaker: "s".into(),
                emotion: "happy".into(),
                split: Split::Train,
            },
            ManifestEntry {
                path: "missing.wav".into(),
                speaker: "s".into(),
                emotion: "sad".into(),
                split: Split::Train,
            },
        ];
        let m = CorpusManifest::new(dir.path(), entries);
        let cache = dir.path().join("cache");
        let r1 = ingest_corpus(&m, &toy_cfg(), &cache).unwrap();
        assert_eq!(r1.written, vec!["good".to_string()]);
        assert_eq!(r1.failed.len(), 1);
        let bytes1 = fs::read(record_path(&cache, "good")).unwrap();
        let r2 = ingest_corpus(&m, &toy_cfg(), &cache).unwrap();
        assert_eq!(r2.skipped, vec!["good".to_string()]);
        fs::remove_file(record_path(&cache, "good")).unwrap();
        ingest_corpus(&m, &toy_cfg(), &cache).unwrap();
        assert_eq!(fs::read(record_path(&cache, "good")).unwrap(), bytes1);
    }
}
