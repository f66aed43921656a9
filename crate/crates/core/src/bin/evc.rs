use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use evc::config::{load_config, ToolkitConfig};
use evc::convert::{parse_pairs, read_index};
use evc::features::{CorpusManifest, Split};
use evc::workflow::{self, BUNDLE_CONFIG};
use evc::Result;

/// Emotional voice conversion toolkit.
#[derive(Parser)]
#[command(name = "evc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file. Falls back to the bundle's, the output directory's or the corpus's config.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Args)]
struct Corpus {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic three-emotion corpus and its manifest.
    GenToy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_per_class: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Analyse every manifest entry into the feature cache.
    Ingest {
        #[command(flatten)]
        corpus: Corpus,
        #[command(flatten)]
        common: Common,
    },
    /// Train the emotion classifier and write statistics into a new bundle.
    TrainClassifier {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction pre-training.
    TrainStage1 {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Adversarial conversion training.
    TrainStage2 {
        #[command(flatten)]
        corpus: Corpus,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Convert one file.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Convert a manifest split for each emotion pair and write index.csv.
    ConvertCorpus {
        #[arg(long)]
        manifest: PathBuf,
        /// e.g. angry:sad,sad:happy
        #[arg(long)]
        pairs: String,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// train, validation, test or all.
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Mel-cepstral distortion between converted files and their sources.
    EvaluateMcd {
        #[arg(long)]
        ref_manifest: PathBuf,
        #[arg(long)]
        conv_index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Emotion recognition with and without converted training data.
    AugmentExperiment {
        #[arg(long)]
        manifest: PathBuf,
        /// Index of conversions from the two-encoder model.
        #[arg(long)]
        conv_index: PathBuf,
        /// Optional index of conversions from a baseline model.
        #[arg(long)]
        baseline_index: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenToy { common, .. }
            | Command::Ingest { common, .. }
            | Command::TrainClassifier { common, .. }
            | Command::TrainStage1 { common, .. }
            | Command::TrainStage2 { common, .. }
            | Command::Convert { common, .. }
            | Command::ConvertCorpus { common, .. }
            | Command::EvaluateMcd { common, .. }
            | Command::AugmentExperiment { common, .. } => common,
        }
    }

    /// Directories whose config.toml is used when --config is absent, in order.
    fn config_dirs(&self) -> Vec<PathBuf> {
        let parent = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
        match self {
            Command::GenToy { .. } => vec![],
            Command::Ingest { corpus, .. } => vec![parent(&corpus.manifest)],
            Command::TrainClassifier { corpus, .. } => vec![parent(&corpus.manifest)],
            Command::TrainStage1 { corpus, out_dir, .. } | Command::TrainStage2 { corpus, out_dir, .. } => {
                vec![out_dir.clone(), parent(&corpus.manifest)]
            }
            Command::Convert { bundle, .. } => vec![bundle.clone()],
            Command::ConvertCorpus { bundle, manifest, .. } => vec![bundle.clone(), parent(manifest)],
            Command::EvaluateMcd { ref_manifest, .. } => vec![parent(ref_manifest)],
            Command::AugmentExperiment { manifest, .. } => vec![parent(manifest)],
        }
    }
}

fn resolve_config(cmd: &Command) -> Result<ToolkitConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => match cmd.config_dirs().into_iter().find(|d| d.join(BUNDLE_CONFIG).is_file()) {
            Some(d) => {
                info!("using {}", d.join(BUNDLE_CONFIG).display());
                load_config(&d.join(BUNDLE_CONFIG))?
            }
            None if matches!(cmd, Command::GenToy { .. }) => workflow::toy_config(),
            None => ToolkitConfig::default(),
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        _ => serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map(Some)
            .map_err(|_| evc::EvcError::Config(format!("unknown split `{s}`"))),
    }
}

fn manifest_and_cache(cfg: &ToolkitConfig, c: &Corpus) -> Result<(CorpusManifest, PathBuf)> {
    let m = CorpusManifest::read(&c.manifest)?;
    let cache = workflow::cache_dir(cfg, &m, c.cache.as_deref());
    Ok((m, cache))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    let cfg = resolve_config(&cmd)?;
    match cmd {
        Command::GenToy { out_dir, n_per_class, .. } => {
            let m = workflow::gen_toy(&cfg, &out_dir, n_per_class)?;
            std::fs::write(out_dir.join(BUNDLE_CONFIG), cfg.to_toml_string())?;
            println!("{} utterances in {}", m.entries.len(), out_dir.join("manifest.csv").display());
        }
        Command::Ingest { corpus, .. } => {
            let (m, cache) = manifest_and_cache(&cfg, &corpus)?;
            let r = workflow::ingest(&cfg, &m, &cache)?;
            println!("{} analysed, {} already cached in {}", r.written.len(), r.skipped.len(), cache.display());
        }
        Command::TrainClassifier { corpus, out_dir, .. } => {
            let (m, cache) = manifest_and_cache(&cfg, &corpus)?;
            workflow::ingest(&cfg, &m, &cache)?;
            print_json(&workflow::train_classifier_step(&cfg, &m, &cache, &out_dir)?)?;
        }
        Command::TrainStage1 { corpus, out_dir, max_steps, .. } => {
            let (m, cache) = manifest_and_cache(&cfg, &corpus)?;
            workflow::ingest(&cfg, &m, &cache)?;
            print_json(&workflow::train_stage1_step(&cfg, &m, &cache, &out_dir, max_steps)?)?;
        }
        Command::TrainStage2 { corpus, out_dir, .. } => {
            let (m, cache) = manifest_and_cache(&cfg, &corpus)?;
            workflow::ingest(&cfg, &m, &cache)?;
            print_json(&workflow::train_stage2_step(&cfg, &m, &cache, &out_dir)?)?;
        }
        Command::Convert { input, source, target, bundle, out, .. } => {
            let f = workflow::convert_file(&cfg, &bundle, &input, &source, &target, &out)?;
            println!("{} frames -> {}", f.f0.len(), out.display());
        }
        Command::ConvertCorpus { manifest, pairs, bundle, out_dir, split, .. } => {
            let m = CorpusManifest::read(&manifest)?;
            let rows =
                workflow::convert_corpus_step(&cfg, &m, parse_split(&split)?, &parse_pairs(&pairs)?, &bundle, &out_dir)?;
            println!("{} files, index {}", rows.len(), out_dir.join("index.csv").display());
        }
        Command::EvaluateMcd { ref_manifest, conv_index, out, .. } => {
            let m = CorpusManifest::read(&ref_manifest)?;
            let report = workflow::evaluate_mcd_step(&cfg, &m, &read_index(&conv_index)?)?;
            workflow::save_json(&out, &report)?;
            for (pair, v) in &report.pairs {
                println!("{pair}: {v:.3} dB");
            }
            println!("overall: {:.3} dB", report.overall);
        }
        Command::AugmentExperiment { manifest, conv_index, baseline_index, out, .. } => {
            let m = CorpusManifest::read(&manifest)?;
            let r = workflow::augment_experiment_step(&cfg, &m, &conv_index, baseline_index.as_deref())?;
            workflow::save_json(&out, &r)?;
            for v in &r.variants {
                println!(
                    "{:<14} n={:<5} micro {:6.2} macro {:6.2}",
                    v.variant, v.train_size, v.micro_f1, v.macro_f1
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.command.common().verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
