//! The toolkit's end-to-end steps, shared by the command-line front end,
//! the examples and the integration tests.
//!
//! A training output directory doubles as the model bundle: every step
//! writes its artifacts there, stamped with the configuration hash, and the
//! next step refuses artifacts produced under a different configuration.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::config::ToolkitConfig;
use crate::convert::{
    convert_corpus, read_index, IndexRow, ModelBundle, BUNDLE_CLASSIFIER, BUNDLE_CLASS_MEANS, BUNDLE_F0, BUNDLE_NORM,
    BUNDLE_STAGE1, BUNDLE_STAGE2,
};
use crate::data::NormStats;
use crate::embedding::{class_means, train_classifier, ClassMeans, ClassifierArch, ClassifierTraining, EmotionClassifier, LabeledMcep};
use crate::error::{EvcError, Result};
use crate::f0::{compute_class_stats, compute_deltas, F0StatsDocument, LabeledContour};
use crate::features::{ingest_corpus, load_split, CorpusManifest, FeatureExtractor, IngestReport, Split, UtteranceFeatures};
use crate::mcd::{mcd, McdReport, McdSettings, UtteranceMcd};
use crate::ser::{augmentation_experiment, AugmentationResult, LabeledWave, Variant};
use crate::stargan::{load_checkpoint, save_checkpoint, StarGan, StarGanArch};
use crate::train::{
    cycle_l1, domain_accuracy, reconstruction_l1, train_stage1, train_stage2, Counters, Stage1Options, Stage2Options,
    TrainingSet,
};

/// Resolved configuration copied into every bundle.
pub const BUNDLE_CONFIG: &str = "config.toml";

/// A small configuration sized for the synthetic corpus.
pub const TOY_CONFIG: &str = include_str!("../configs/toy.toml");

pub fn toy_config() -> ToolkitConfig {
    ToolkitConfig::from_toml_str(TOY_CONFIG).expect("bundled toy configuration is valid")
}

/// Feature cache location: explicit override, then `data.cache_dir`, then `<manifest dir>/cache`.
pub fn cache_dir(cfg: &ToolkitConfig, manifest: &CorpusManifest, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.cache_dir.clone())
        .unwrap_or_else(|| manifest.base_dir.join("cache"))
}

/// Writes the synthetic corpus and its `manifest.csv` under `out_dir`.
pub fn gen_toy(cfg: &ToolkitConfig, out_dir: &Path, n_per_class: usize) -> Result<CorpusManifest> {
    crate::toy_corpus::generate_toy_corpus(out_dir, &cfg.data.labels, n_per_class, cfg.seed)
}

/// Analyses the manifest into the cache; any unanalysable entry is a data error.
pub fn ingest(cfg: &ToolkitConfig, manifest: &CorpusManifest, cache: &Path) -> Result<IngestReport> {
    let report = ingest_corpus(manifest, &cfg.data, cache)?;
    if let Some((id, msg)) = report.failed.first() {
        return Err(EvcError::data(format!(
            "{} of {} utterances failed analysis; first: {id}: {msg}",
            report.failed.len(),
            manifest.entries.len()
        )));
    }
    Ok(report)
}

fn check_hash(what: &str, found: &str, cfg: &ToolkitConfig) -> Result<()> {
    let want = cfg.config_hash();
    if found != want {
        return Err(EvcError::config(format!(
            "{what} was produced under configuration {}, current configuration is {}",
            &found[..found.len().min(12)],
            &want[..12]
        )));
    }
    Ok(())
}

fn load_norm(cfg: &ToolkitConfig, out_dir: &Path) -> Result<NormStats> {
    let norm = NormStats::load(&out_dir.join(BUNDLE_NORM))?;
    check_hash("normalisation statistics", &norm.config_hash, cfg)?;
    Ok(norm)
}

fn load_encoder(cfg: &ToolkitConfig, out_dir: &Path) -> Result<EmotionClassifier> {
    let (clf, hash) = EmotionClassifier::load(&out_dir.join(BUNDLE_CLASSIFIER))?;
    check_hash("emotion classifier", &hash, cfg)?;
    Ok(clf)
}

fn load_means(cfg: &ToolkitConfig, out_dir: &Path) -> Result<ClassMeans> {
    let (means, hash) = ClassMeans::load(&out_dir.join(BUNDLE_CLASS_MEANS))?;
    check_hash("class means", &hash, cfg)?;
    Ok(means)
}

/// Normalised training split as a [`TrainingSet`].
pub fn training_set(cfg: &ToolkitConfig, feats: &[UtteranceFeatures], norm: &NormStats) -> Result<TrainingSet> {
    if feats.is_empty() {
        return Err(EvcError::data("training split is empty"));
    }
    let mceps = feats.iter().map(|f| norm.normalize(f.mcep()?)).collect::<Result<_>>()?;
    let classes = feats.iter().map(|f| cfg.label_index(&f.emotion)).collect::<Result<_>>()?;
    Ok(TrainingSet {
        labels: cfg.data.labels.clone(),
        mceps,
        classes,
    })
}

fn labeled(set: &TrainingSet) -> Vec<LabeledMcep<'_>> {
    set.mceps
        .iter()
        .zip(&set.classes)
        .map(|(m, &label)| LabeledMcep { mcep: m, label })
        .collect()
}

fn canon(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    crate::archive::write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub train_utterances: usize,
    pub train_accuracy: f64,
    pub checksum: String,
    pub config_hash: String,
}

/// Fits normalisation and F0 statistics on the training split, trains the
/// emotion encoder and stores its class-mean embeddings.
pub fn train_classifier_step(
    cfg: &ToolkitConfig,
    manifest: &CorpusManifest,
    cache: &Path,
    out_dir: &Path,
) -> Result<ClassifierSummary> {
    fs::create_dir_all(out_dir)?;
    let hash = cfg.config_hash();
    crate::archive::write_atomic(&out_dir.join(BUNDLE_CONFIG), cfg.to_toml_string().as_bytes())?;
    let feats = load_split(manifest, cache, Split::Train)?;
    let norm = NormStats::fit(feats.iter().map(|f| f.mcep()).collect::<Result<Vec<_>>>()?, &hash)?;
    norm.save(&out_dir.join(BUNDLE_NORM))?;

    let stats = compute_class_stats(
        feats.iter().map(|f| LabeledContour {
            speaker: &f.speaker_id,
            emotion: &f.emotion,
            f0: &f.f0,
        }),
        &cfg.data.labels,
        cfg.data.f0_grouping,
        cfg.data.f0_spread,
    )?;
    let deltas = compute_deltas(&stats)?;
    F0StatsDocument::new(&stats, deltas, &hash).save(&out_dir.join(BUNDLE_F0))?;

    let set = training_set(cfg, &feats, &norm)?;
    let data = labeled(&set);
    let clf = train_classifier(
        &data,
        &cfg.data.labels,
        ClassifierArch::from_config(cfg),
        cfg.model.embedding_source,
        &ClassifierTraining::from_config(cfg),
    )?;
    clf.save(&out_dir.join(BUNDLE_CLASSIFIER), &hash)?;
    class_means(&clf, &data)?.save(&out_dir.join(BUNDLE_CLASS_MEANS), &hash)?;
    let summary = ClassifierSummary {
        train_utterances: set.len(),
        train_accuracy: clf.train_accuracy,
        checksum: clf.params.checksum(),
        config_hash: hash,
    };
    write_json(&out_dir.join("classifier_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub steps: usize,
    pub initial_reconstruction_l1: f64,
    pub final_reconstruction_l1: f64,
    pub classifier_checksum_before: String,
    pub classifier_checksum_after: String,
    pub config_hash: String,
}

/// Autoencoder pretraining. `max_steps` caps the run inside an epoch.
pub fn train_stage1_step(
    cfg: &ToolkitConfig,
    manifest: &CorpusManifest,
    cache: &Path,
    out_dir: &Path,
    max_steps: Option<usize>,
) -> Result<Stage1Summary> {
    let norm = load_norm(cfg, out_dir)?;
    let encoder = load_encoder(cfg, out_dir)?;
    let set = training_set(cfg, &load_split(manifest, cache, Split::Train)?, &norm)?;
    let arch = StarGanArch::from_config(cfg, encoder.embedding_dim());
    let (gan, params) = StarGan::new(arch, cfg.seed);
    let initial = reconstruction_l1(&gan, &params, &encoder, &set)?;
    let mut opts = Stage1Options::from_config(cfg);
    opts.max_steps = max_steps;
    opts.last_good_path = Some(out_dir.join("stage1_last_good.ckpt"));
    let outcome = train_stage1(&set, &encoder, &gan, params, &opts)?;
    save_checkpoint(&out_dir.join(BUNDLE_STAGE1), &gan, &outcome.params, &outcome.meta)?;
    let logs = out_dir.join("logs");
    fs::create_dir_all(&logs)?;
    outcome.log.write(&logs.join("stage1.jsonl"), &logs.join("stage1_summary.json"))?;
    let summary = Stage1Summary {
        steps: outcome.log.counters.g,
        initial_reconstruction_l1: initial,
        final_reconstruction_l1: reconstruction_l1(&gan, &outcome.params, &encoder, &set)?,
        classifier_checksum_before: outcome.log.classifier_checksum_before.clone(),
        classifier_checksum_after: outcome.log.classifier_checksum_after.clone(),
        config_hash: cfg.config_hash(),
    };
    info!(
        "stage 1: reconstruction L1 {:.4} -> {:.4}",
        summary.initial_reconstruction_l1, summary.final_reconstruction_l1
    );
    write_json(&out_dir.join("stage1_report.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub epochs: usize,
    pub counters: Counters,
    pub stop_reason: String,
    /// Cycle L1 of a freshly initialised generator.
    pub untrained_cycle_l1: f64,
    /// Cycle L1 of the stage-1 generator.
    pub initial_cycle_l1: f64,
    pub final_cycle_l1: f64,
    pub domain_accuracy: f64,
    pub classifier_checksum_before: String,
    pub classifier_checksum_after: String,
    pub config_hash: String,
}

/// Many-to-many training from the stage-1 checkpoint.
pub fn train_stage2_step(cfg: &ToolkitConfig, manifest: &CorpusManifest, cache: &Path, out_dir: &Path) -> Result<Stage2Summary> {
    let norm = load_norm(cfg, out_dir)?;
    let encoder = load_encoder(cfg, out_dir)?;
    let means = load_means(cfg, out_dir)?;
    let (gan, params, meta) = load_checkpoint(&out_dir.join(BUNDLE_STAGE1))?;
    check_hash("stage-1 checkpoint", &meta.config_hash, cfg)?;
    let set = training_set(cfg, &load_split(manifest, cache, Split::Train)?, &norm)?;
    let (_, fresh) = StarGan::new(gan.arch.clone(), cfg.seed ^ 0xBA5E);
    let untrained = cycle_l1(&gan, &fresh, &means, &set)?;
    let initial = cycle_l1(&gan, &params, &means, &set)?;
    let mut opts = Stage2Options::from_config(cfg);
    opts.last_good_path = Some(out_dir.join("stage2_last_good.ckpt"));
    let outcome = train_stage2(&set, &means, &encoder, &gan, params, &opts)?;
    save_checkpoint(&out_dir.join(BUNDLE_STAGE2), &gan, &outcome.params, &outcome.meta)?;
    let logs = out_dir.join("logs");
    fs::create_dir_all(&logs)?;
    outcome.log.write(&logs.join("stage2.jsonl"), &logs.join("stage2_summary.json"))?;
    let summary = Stage2Summary {
        epochs: outcome.log.epochs.len(),
        counters: outcome.log.counters,
        stop_reason: outcome.log.stop_reason.clone(),
        untrained_cycle_l1: untrained,
        initial_cycle_l1: initial,
        final_cycle_l1: cycle_l1(&gan, &outcome.params, &means, &set)?,
        domain_accuracy: domain_accuracy(&gan, &outcome.params, &set)?,
        classifier_checksum_before: outcome.log.classifier_checksum_before.clone(),
        classifier_checksum_after: outcome.log.classifier_checksum_after.clone(),
        config_hash: cfg.config_hash(),
    };
    info!(
        "stage 2: cycle L1 {:.4} (untrained {:.4}), domain accuracy {:.3}",
        summary.final_cycle_l1, summary.untrained_cycle_l1, summary.domain_accuracy
    );
    write_json(&out_dir.join("stage2_report.json"), &summary)?;
    Ok(summary)
}

/// Loads a bundle, warning when it was trained under a different configuration.
pub fn open_bundle(cfg: &ToolkitConfig, dir: &Path) -> Result<ModelBundle> {
    let bundle = ModelBundle::load(dir, cfg.model.energy)?;
    if bundle.config_hash != cfg.config_hash() {
        warn!("bundle {} was trained under a different configuration", dir.display());
    }
    Ok(bundle)
}

/// The configuration stored in a bundle, if any.
pub fn bundle_config(dir: &Path) -> Result<Option<ToolkitConfig>> {
    let p = dir.join(BUNDLE_CONFIG);
    if !p.exists() {
        return Ok(None);
    }
    crate::config::load_config(&p).map(Some)
}

/// Converts one wav file.
pub fn convert_file(cfg: &ToolkitConfig, bundle_dir: &Path, input: &Path, source: &str, target: &str, output: &Path) -> Result<UtteranceFeatures> {
    let bundle = open_bundle(cfg, bundle_dir)?;
    let extractor = FeatureExtractor::new(&cfg.data)?;
    let wave = Waveform::read_wav(input)?;
    let (out, feats) = crate::convert::convert_utterance(&bundle, &extractor, &wave, source, target)?;
    out.write_wav(output)?;
    Ok(feats)
}

/// Converts the entries of `split` (every entry when `None`) for each pair.
pub fn convert_corpus_step(
    cfg: &ToolkitConfig,
    manifest: &CorpusManifest,
    split: Option<Split>,
    pairs: &[(String, String)],
    bundle_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<IndexRow>> {
    let bundle = open_bundle(cfg, bundle_dir)?;
    let extractor = FeatureExtractor::new(&cfg.data)?;
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| split.map_or(true, |s| e.split == s))
        .collect();
    convert_corpus(&bundle, &extractor, manifest, &entries, pairs, out_dir)
}

/// MCD of every converted file against its source recording, analysed with the same settings.
pub fn evaluate_mcd_step(cfg: &ToolkitConfig, ref_manifest: &CorpusManifest, index: &[IndexRow]) -> Result<McdReport> {
    let known: std::collections::HashSet<PathBuf> = ref_manifest.entries.iter().map(|e| canon(&ref_manifest.resolve(e))).collect();
    if let Some(r) = index.iter().find(|r| !known.contains(&canon(&r.source_path))) {
        return Err(EvcError::data(format!(
            "converted file {} has source {} outside the reference manifest",
            r.output_path.display(),
            r.source_path.display()
        )));
    }
    let extractor = FeatureExtractor::new(&cfg.data)?;
    let settings = McdSettings::from_config(&cfg.eval);
    let analyse = |p: &Path| -> Result<UtteranceFeatures> { extractor.extract(&Waveform::read_wav(p)?, "mcd", "unknown", "unknown") };
    let utterances = index
        .par_iter()
        .map(|r| {
            let reference = analyse(&r.source_path)?;
            let converted = analyse(&r.output_path)?;
            Ok(UtteranceMcd {
                reference: r.source_path.display().to_string(),
                converted: r.output_path.display().to_string(),
                source_emotion: r.source_emotion.clone(),
                target_emotion: r.target_emotion.clone(),
                mcd_db: mcd(reference.mcep()?, converted.mcep()?, &settings)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    McdReport::from_utterances(utterances, &settings, &cfg.config_hash())
}

struct Loaded {
    samples: Vec<f64>,
    label: usize,
}

fn load_waves(cfg: &ToolkitConfig, items: impl Iterator<Item = (PathBuf, String)>) -> Result<Vec<Loaded>> {
    let items: Vec<_> = items.collect();
    items
        .par_iter()
        .map(|(p, emo)| {
            let w = Waveform::read_wav(p)?;
            if w.sample_rate != cfg.data.sample_rate {
                return Err(EvcError::data(format!("{} is not {} Hz", p.display(), cfg.data.sample_rate)));
            }
            Ok(Loaded {
                samples: w.samples,
                label: cfg.label_index(emo)?,
            })
        })
        .collect()
}

fn as_labeled(v: &[Loaded]) -> Vec<LabeledWave<'_>> {
    v.iter()
        .map(|l| LabeledWave {
            samples: &l.samples,
            label: l.label,
        })
        .collect()
}

/// Converted rows whose source lies in the training split; the rest would leak evaluation data.
fn train_rows(manifest: &CorpusManifest, index: &[IndexRow]) -> Vec<(PathBuf, String)> {
    let train: std::collections::HashSet<PathBuf> = manifest.split(Split::Train).map(|e| canon(&manifest.resolve(e))).collect();
    let (keep, drop): (Vec<_>, Vec<_>) = index.iter().partition(|r| train.contains(&canon(&r.source_path)));
    if !drop.is_empty() {
        warn!("ignoring {} converted files whose source is not in the training split", drop.len());
    }
    keep.into_iter()
        .map(|r| (r.output_path.clone(), r.target_emotion.clone()))
        .collect()
}

/// SER training on real data with and without converted speech.
pub fn augment_experiment_step(
    cfg: &ToolkitConfig,
    manifest: &CorpusManifest,
    improved_index: &Path,
    baseline_index: Option<&Path>,
) -> Result<AugmentationResult> {
    manifest.validate(&cfg.data.labels)?;
    let split = |s: Split| manifest.split(s).map(|e| (manifest.resolve(e), e.emotion.clone()));
    let real = load_waves(cfg, split(Split::Train))?;
    let val = load_waves(cfg, split(Split::Validation))?;
    let test = load_waves(cfg, split(Split::Test))?;
    let mut extra = Vec::new();
    if let Some(p) = baseline_index {
        extra.push(("real+baseline", load_waves(cfg, train_rows(manifest, &read_index(p)?).into_iter())?));
    }
    extra.push(("real+improved", load_waves(cfg, train_rows(manifest, &read_index(improved_index)?).into_iter())?));
    let variants: Vec<Variant> = extra
        .iter()
        .map(|(name, waves)| Variant {
            name: name.to_string(),
            extra: as_labeled(waves),
        })
        .collect();
    augmentation_experiment(
        &as_labeled(&real),
        &variants,
        &as_labeled(&val),
        &as_labeled(&test),
        &cfg.data.labels,
        &cfg.eval,
        cfg.eval.trials,
        cfg.seed,
        &cfg.config_hash(),
    )
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(path, value)
}

/// Every default bundle artifact name, in production order.
pub fn bundle_files() -> [&'static str; 7] {
    [
        BUNDLE_CONFIG,
        BUNDLE_NORM,
        BUNDLE_F0,
        BUNDLE_CLASSIFIER,
        BUNDLE_CLASS_MEANS,
        BUNDLE_STAGE1,
        BUNDLE_STAGE2,
    ]
}
