//! Toolkit configuration: a TOML document with sections `data`, `model`,
//! `optim`, `stage1`, `stage2` and `eval`, plus a top-level `seed`.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. The configuration hash is a SHA-256 digest of
//! the fully resolved configuration serialised as JSON and is stamped into
//! every checkpoint and report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EvcError, Result};
use crate::f0::{Grouping, Spread};
use crate::nn::AdamConfig;
use crate::vocoder::VocoderKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolkitConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub frame_period_ms: f64,
    pub fft_size: usize,
    pub mcep_order: usize,
    pub mcep_alpha: f64,
    pub vocoder: VocoderKind,
    pub labels: Vec<String>,
    pub f0_grouping: Grouping,
    pub f0_spread: Spread,
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sample_rate: 16_000,
            frame_period_ms: 5.0,
            fft_size: 1024,
            mcep_order: 36,
            mcep_alpha: 0.42,
            vocoder: if cfg!(feature = "world") {
                VocoderKind::World
            } else {
                VocoderKind::Toy
            },
            labels: vec!["angry".into(), "sad".into(), "happy".into()],
            f0_grouping: Grouping::PerSpeaker,
            f0_spread: Spread::Std,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    Penultimate,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adversarial {
    WganGp,
    Lsgan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyMode {
    /// Coefficient 0 goes through the generator like every other coefficient.
    Convert,
    /// Coefficient 0 is copied from the source utterance.
    CopySource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub chunk_len: usize,
    pub embedding_dim: usize,
    pub embedding_source: EmbeddingSource,
    pub classifier_channels: Vec<usize>,
    pub classifier_kernels: Vec<usize>,
    pub classifier_strides: Vec<usize>,
    pub enc_channels: Vec<usize>,
    pub enc_kernels: Vec<usize>,
    pub enc_strides: Vec<usize>,
    pub latent_channels: usize,
    pub dec_channels: Vec<usize>,
    pub dec_kernel: usize,
    pub disc_channels: Vec<usize>,
    pub disc_kernels: Vec<usize>,
    pub disc_strides: Vec<usize>,
    pub disc_conditioned: bool,
    pub adversarial: Adversarial,
    pub energy: EnergyMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            chunk_len: 128,
            embedding_dim: 64,
            embedding_source: EmbeddingSource::Penultimate,
            classifier_channels: vec![32, 32],
            classifier_kernels: vec![5, 4],
            classifier_strides: vec![1, 2],
            enc_channels: vec![64, 64, 64],
            enc_kernels: vec![5, 4, 4],
            enc_strides: vec![1, 2, 2],
            latent_channels: 16,
            dec_channels: vec![64, 64, 64],
            dec_kernel: 5,
            disc_channels: vec![32, 32, 32],
            disc_kernels: vec![5, 4, 4],
            disc_strides: vec![1, 2, 2],
            disc_conditioned: true,
            adversarial: Adversarial::WganGp,
            energy: EnergyMode::Convert,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub critic_updates_per_gen: usize,
    pub classifier_lr: f64,
    pub classifier_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            batch_size: 4,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            critic_updates_per_gen: 5,
            classifier_lr: 1e-4,
            classifier_steps: 3000,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn classifier_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.classifier_lr,
            ..self.adam()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lambda_rec: f64,
    pub lambda_gp: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 400,
            lambda_rec: 10.0,
            lambda_gp: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub max_epochs: usize,
    pub plateau_window: usize,
    pub plateau_min_rel_improvement: f64,
    pub lambda_cyc: f64,
    pub lambda_cls: f64,
    pub lambda_gp: f64,
    pub reinit_discriminator: bool,
    /// Generator updates per epoch; derived from the corpus size when absent.
    pub gen_steps_per_epoch: Option<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            max_epochs: 400,
            plateau_window: 20,
            plateau_min_rel_improvement: 0.01,
            lambda_cyc: 10.0,
            lambda_cls: 1.0,
            lambda_gp: 10.0,
            reinit_discriminator: false,
            gen_steps_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mcd_first_dim: usize,
    pub mcd_last_dim: usize,
    pub mcd_dtw: bool,
    pub ser_lr: f64,
    pub ser_beta1: f64,
    pub ser_beta2: f64,
    pub ser_batch_size: usize,
    pub ser_epochs: usize,
    pub ser_frames: usize,
    pub ser_frame_len: usize,
    pub ser_hop: usize,
    pub ser_channels: Vec<usize>,
    pub ser_kernels: Vec<usize>,
    pub ser_strides: Vec<usize>,
    pub ser_attention_dim: usize,
    pub trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mcd_first_dim: 1,
            mcd_last_dim: 35,
            mcd_dtw: true,
            ser_lr: 1e-5,
            ser_beta1: 0.5,
            ser_beta2: 0.999,
            ser_batch_size: 4,
            ser_epochs: 40,
            ser_frames: 16,
            ser_frame_len: 640,
            ser_hop: 160,
            ser_channels: vec![16, 32],
            ser_kernels: vec![64, 8],
            ser_strides: vec![16, 4],
            ser_attention_dim: 16,
            trials: 10,
        }
    }
}

impl EvalConfig {
    pub fn ser_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.ser_lr,
            beta1: self.ser_beta1,
            beta2: self.ser_beta2,
            ..AdamConfig::default()
        }
    }
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        ToolkitConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(EvcError::config(format!("`{name}` must be positive, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(EvcError::config(format!("`{name}` must be at least 1")))
    }
}

fn stack(name: &str, channels: &[usize], kernels: &[usize], strides: &[usize]) -> Result<()> {
    if channels.is_empty() || channels.len() != kernels.len() || channels.len() != strides.len() {
        return Err(EvcError::config(format!(
            "`{name}` channels/kernels/strides must be non-empty and of equal length"
        )));
    }
    for (&k, &s) in kernels.iter().zip(strides) {
        if s == 0 || k < s {
            return Err(EvcError::config(format!(
                "`{name}` needs stride >= 1 and kernel >= stride (kernel {k}, stride {s})"
            )));
        }
    }
    if channels.contains(&0) {
        return Err(EvcError::config(format!("`{name}` channel counts must be positive")));
    }
    Ok(())
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(EvcError::config(format!("`{name}` must be in [0, 1), got {v}")))
    }
}

impl ToolkitConfig {
    /// Parses TOML text and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ToolkitConfig =
            toml::from_str(text).map_err(|e| EvcError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        nonzero("data.sample_rate", d.sample_rate as usize)?;
        positive("data.frame_period_ms", d.frame_period_ms)?;
        if !d.fft_size.is_power_of_two() || d.fft_size < 256 {
            return Err(EvcError::config("`data.fft_size` must be a power of two >= 256"));
        }
        if d.mcep_order < 2 || d.mcep_order > d.fft_size / 2 {
            return Err(EvcError::config("`data.mcep_order` out of range"));
        }
        if !(d.mcep_alpha.abs() < 1.0) {
            return Err(EvcError::config("`data.mcep_alpha` must satisfy |alpha| < 1"));
        }
        if d.labels.len() < 2 {
            return Err(EvcError::config("`data.labels` needs at least two emotions"));
        }
        let mut sorted = d.labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != d.labels.len() || d.labels.iter().any(|l| l.is_empty() || l.contains([',', ':'])) {
            return Err(EvcError::config("`data.labels` must be distinct, non-empty and free of ',' or ':'"));
        }

        let m = &self.model;
        nonzero("model.chunk_len", m.chunk_len)?;
        nonzero("model.embedding_dim", m.embedding_dim)?;
        nonzero("model.latent_channels", m.latent_channels)?;
        nonzero("model.dec_kernel", m.dec_kernel)?;
        stack("model.classifier", &m.classifier_channels, &m.classifier_kernels, &m.classifier_strides)?;
        stack("model.enc", &m.enc_channels, &m.enc_kernels, &m.enc_strides)?;
        stack("model.disc", &m.disc_channels, &m.disc_kernels, &m.disc_strides)?;
        if m.dec_channels.len() != m.enc_channels.len() || m.dec_channels.contains(&0) {
            return Err(EvcError::config("`model.dec_channels` must mirror `model.enc_channels`"));
        }
        let total: usize = m.enc_strides.iter().product();
        if m.chunk_len % total != 0 {
            return Err(EvcError::config(format!(
                "`model.chunk_len` {} must be divisible by the encoder stride product {total}",
                m.chunk_len
            )));
        }
        if m.embedding_source == EmbeddingSource::Softmax && m.embedding_dim != d.labels.len() {
            return Err(EvcError::config(
                "`model.embedding_dim` must equal the number of labels when embedding_source = \"softmax\"",
            ));
        }

        let o = &self.optim;
        nonzero("optim.batch_size", o.batch_size)?;
        nonzero("optim.critic_updates_per_gen", o.critic_updates_per_gen)?;
        nonzero("optim.classifier_steps", o.classifier_steps)?;
        positive("optim.lr", o.lr)?;
        positive("optim.classifier_lr", o.classifier_lr)?;
        unit_interval("optim.beta1", o.beta1)?;
        unit_interval("optim.beta2", o.beta2)?;

        nonzero("stage1.epochs", self.stage1.epochs)?;
        let s2 = &self.stage2;
        nonzero("stage2.max_epochs", s2.max_epochs)?;
        nonzero("stage2.plateau_window", s2.plateau_window)?;
        if let Some(n) = s2.gen_steps_per_epoch {
            nonzero("stage2.gen_steps_per_epoch", n)?;
        }
        for (name, v) in [
            ("stage1.lambda_rec", self.stage1.lambda_rec),
            ("stage1.lambda_gp", self.stage1.lambda_gp),
            ("stage2.lambda_cyc", s2.lambda_cyc),
            ("stage2.lambda_cls", s2.lambda_cls),
            ("stage2.lambda_gp", s2.lambda_gp),
            ("stage2.plateau_min_rel_improvement", s2.plateau_min_rel_improvement),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EvcError::config(format!("`{name}` must be non-negative")));
            }
        }

        let e = &self.eval;
        if e.mcd_first_dim > e.mcd_last_dim || e.mcd_last_dim >= d.mcep_order {
            return Err(EvcError::config("`eval.mcd_first_dim..=mcd_last_dim` must lie inside the cepstral order"));
        }
        positive("eval.ser_lr", e.ser_lr)?;
        unit_interval("eval.ser_beta1", e.ser_beta1)?;
        unit_interval("eval.ser_beta2", e.ser_beta2)?;
        nonzero("eval.ser_batch_size", e.ser_batch_size)?;
        nonzero("eval.ser_epochs", e.ser_epochs)?;
        nonzero("eval.ser_frames", e.ser_frames)?;
        nonzero("eval.ser_frame_len", e.ser_frame_len)?;
        nonzero("eval.ser_hop", e.ser_hop)?;
        nonzero("eval.ser_attention_dim", e.ser_attention_dim)?;
        nonzero("eval.trials", e.trials)?;
        stack("eval.ser", &e.ser_channels, &e.ser_kernels, &e.ser_strides)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to toml")
    }

    /// Index of an emotion label.
    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.data
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| EvcError::config(format!("unknown emotion label `{label}`")))
    }
}

/// Loads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ToolkitConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvcError::config(format!("cannot read {}: {e}", path.display())))?;
    ToolkitConfig::from_toml_str(&text)
}
