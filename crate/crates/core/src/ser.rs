//! Raw-waveform speech emotion recognition used to measure the value of
//! converted speech as training data.
//!
//! Each example is a matrix of `frames` overlapping windows of `frame_len`
//! samples taken `hop` apart. A strided convolution stack summarises every
//! window, additive attention pools the windows, and a linear layer scores
//! the classes.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::error::{EvcError, Result};
use crate::nn::{argmax_rows, cross_entropy, Adam, AdamConfig, Bound, GluConv, Linear, ParamSet, Seq};
use crate::tape::{Mat, Tape, Var};

/// Window layout of one SER example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerInputSpec {
    pub frames: usize,
    pub frame_len: usize,
    pub hop: usize,
}

impl SerInputSpec {
    pub fn from_config(e: &EvalConfig) -> Self {
        SerInputSpec {
            frames: e.ser_frames,
            frame_len: e.ser_frame_len,
            hop: e.ser_hop,
        }
    }

    /// Samples spanned by one example.
    pub fn span(&self) -> usize {
        self.frame_len + (self.frames - 1) * self.hop
    }

    /// Largest valid start for a wave of `n` samples (after padding).
    pub fn max_start(&self, n: usize) -> usize {
        n.saturating_sub(self.span())
    }
}

/// Scalar standardisation of raw samples, fitted on real training audio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveStandardizer {
    pub mean: f64,
    pub std: f64,
}

impl WaveStandardizer {
    pub fn fit<'a>(waves: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let (mut n, mut s, mut q) = (0usize, 0.0, 0.0);
        for w in waves {
            n += w.len();
            s += w.iter().sum::<f64>();
            q += w.iter().map(|x| x * x).sum::<f64>();
        }
        if n == 0 {
            return Err(EvcError::stats("no samples to standardise SER input"));
        }
        let mean = s / n as f64;
        let std = (q / n as f64 - mean * mean).max(0.0).sqrt().max(1e-8);
        Ok(WaveStandardizer { mean, std })
    }

    pub fn identity() -> Self {
        WaveStandardizer { mean: 0.0, std: 1.0 }
    }
}

/// The example starting at sample `start`; waves shorter than the span are zero-padded.
pub fn ser_input_at(samples: &[f64], spec: &SerInputSpec, norm: &WaveStandardizer, start: usize) -> Result<Mat> {
    let n = samples.len().max(spec.span());
    if start > spec.max_start(n) {
        return Err(EvcError::invalid(format!(
            "SER window start {start} exceeds the last valid start {}",
            spec.max_start(n)
        )));
    }
    let at = |k: usize| samples.get(k).copied().unwrap_or(0.0);
    Ok(Mat::from_shape_fn((spec.frames, spec.frame_len), |(i, j)| {
        (at(start + i * spec.hop + j) - norm.mean) / norm.std
    }))
}

/// The example at a start drawn uniformly from all valid starts by `seed`.
pub fn ser_prepare_input(samples: &[f64], spec: &SerInputSpec, norm: &WaveStandardizer, seed: u64) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = spec.max_start(samples.len().max(spec.span()));
    ser_input_at(samples, spec, norm, rng.gen_range(0..=top))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerArch {
    pub input: SerInputSpec,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub attention_dim: usize,
    pub n_classes: usize,
}

impl SerArch {
    pub fn from_config(e: &EvalConfig, n_classes: usize) -> Self {
        SerArch {
            input: SerInputSpec::from_config(e),
            channels: e.ser_channels.clone(),
            kernels: e.ser_kernels.clone(),
            strides: e.ser_strides.clone(),
            attention_dim: e.ser_attention_dim,
            n_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerNet {
    pub arch: SerArch,
    convs: Vec<GluConv>,
    att_proj: Linear,
    att_score: Linear,
    head: Linear,
}

impl SerNet {
    pub fn new(arch: SerArch, rng: &mut ChaCha8Rng) -> (Self, ParamSet) {
        let mut ps = ParamSet::new();
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (i, ((&c, &k), &s)) in arch.channels.iter().zip(&arch.kernels).zip(&arch.strides).enumerate() {
            convs.push(GluConv::new(&mut ps, rng, &format!("ser.conv{i}"), c_in, c, k, s));
            c_in = c;
        }
        let att_proj = Linear::new(&mut ps, rng, "ser.att.proj", c_in, arch.attention_dim);
        let att_score = Linear::new_no_bias(&mut ps, rng, "ser.att.score", arch.attention_dim, 1);
        let head = Linear::new(&mut ps, rng, "ser.head", c_in, arch.n_classes);
        (
            SerNet {
                arch,
                convs,
                att_proj,
                att_score,
                head,
            },
            ps,
        )
    }

    /// Logits `(batch, classes)` for examples stacked as `(batch * frames, frame_len)`.
    pub fn forward(&self, p: &Bound, x: &Mat) -> Result<Var> {
        let spec = self.arch.input;
        if x.ncols() != spec.frame_len || x.nrows() % spec.frames != 0 {
            return Err(EvcError::invalid(format!(
                "SER input must be (batch * {}, {}), got {:?}",
                spec.frames,
                spec.frame_len,
                x.dim()
            )));
        }
        let windows = x.nrows();
        let tape = p.get(0).tape().clone();
        let samples = x.to_shape((windows * spec.frame_len, 1)).expect("contiguous").to_owned();
        let mut h = Seq::new(tape.constant(samples), windows, spec.frame_len);
        for c in &self.convs {
            h = c.forward(p, &h)?;
        }
        let per_window = h.time_mean();
        let scores = self.att_score.forward(p, &self.att_proj.forward(p, &per_window).tanh());
        let shift = scores.value().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let e = scores.add_scalar(-shift).exp();
        let weights = e.mul(&e.group_sum(spec.frames).recip().group_repeat(spec.frames));
        let pooled = per_window
            .mul(&weights.broadcast_cols(per_window.shape().1))
            .group_sum(spec.frames);
        Ok(self.head.forward(p, &pooled))
    }
}

/// A trained recogniser with its input standardisation.
#[derive(Clone, Debug)]
pub struct SerModel {
    pub net: SerNet,
    pub params: ParamSet,
    pub standardizer: WaveStandardizer,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl SerModel {
    pub fn predict(&self, examples: &[Mat]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(16) {
            let tape = Tape::new();
            let p = self.params.bind(&tape, false);
            out.extend(argmax_rows(&self.net.forward(&p, &stack_examples(chunk))?.value()));
        }
        Ok(out)
    }
}

fn stack_examples(ex: &[Mat]) -> Mat {
    crate::data::stack(ex)
}

/// Raw audio with a class index.
#[derive(Clone, Copy, Debug)]
pub struct LabeledWave<'a> {
    pub samples: &'a [f64],
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SerTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl SerTraining {
    pub fn from_config(e: &EvalConfig, seed: u64) -> Self {
        SerTraining {
            epochs: e.ser_epochs,
            batch_size: e.ser_batch_size,
            adam: e.ser_adam(),
            seed,
        }
    }
}

/// One fixed example per utterance, for validation and testing.
pub fn fixed_examples(data: &[LabeledWave], spec: &SerInputSpec, norm: &WaveStandardizer, seed: u64) -> Result<Vec<Mat>> {
    data.iter()
        .enumerate()
        .map(|(i, d)| ser_prepare_input(d.samples, spec, norm, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        .collect()
}

fn hit_rate(pred: &[usize], data: &[LabeledWave]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    pred.iter().zip(data).filter(|(p, d)| **p == d.label).count() as f64 / data.len() as f64
}

/// Trains on random windows and keeps the parameters with the best validation accuracy
/// (the final epoch when `val` is empty).
pub fn train_ser(
    train: &[LabeledWave],
    val: &[LabeledWave],
    arch: SerArch,
    standardizer: WaveStandardizer,
    opts: &SerTraining,
) -> Result<SerModel> {
    if train.is_empty() {
        return Err(EvcError::data("SER training set is empty"));
    }
    if let Some(d) = train.iter().chain(val).find(|d| d.label >= arch.n_classes) {
        return Err(EvcError::config(format!("SER label {} out of range", d.label)));
    }
    let spec = arch.input;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5E5_0001);
    let (net, mut params) = SerNet::new(arch, &mut rng);
    let mut adam = Adam::new(opts.adam, &params);
    let val_x = fixed_examples(val, &spec, &standardizer, opts.seed)?;
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let examples: Vec<Mat> = batch
                .iter()
                .map(|&i| {
                    let top = spec.max_start(train[i].samples.len());
                    ser_input_at(train[i].samples, &spec, &standardizer, rng.gen_range(0..=top))
                })
                .collect::<Result<_>>()?;
            let targets: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let tape = Tape::new();
            let p = params.bind(&tape, true);
            let loss = cross_entropy(&net.forward(&p, &stack_examples(&examples))?, &targets);
            if !loss.item().is_finite() {
                return Err(EvcError::TrainingDiverged {
                    stage: 3,
                    step,
                    term: "SER cross-entropy".into(),
                });
            }
            adam.update(&mut params, &p.grads(&loss));
            step += 1;
        }
        let val_acc = if val.is_empty() {
            0.0
        } else {
            let model = SerModel {
                net: net.clone(),
                params: params.clone(),
                standardizer,
                best_epoch: epoch,
                best_val_accuracy: 0.0,
            };
            hit_rate(&model.predict(&val_x)?, val)
        };
        debug!("SER epoch {epoch}: validation accuracy {val_acc:.3}");
        if best.as_ref().map_or(true, |(a, _, _)| val_acc > *a || val.is_empty()) {
            best = Some((val_acc, epoch, params.clone()));
        }
    }
    let (best_val_accuracy, best_epoch, params) = best.expect("at least one epoch");
    info!("SER: best validation accuracy {best_val_accuracy:.3} at epoch {best_epoch}");
    Ok(SerModel {
        net,
        params,
        standardizer,
        best_epoch,
        best_val_accuracy,
    })
}

/// Micro and macro F1 in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
}

/// F1 over `n_classes` labels. A class with no true, predicted or correct members scores 0.
pub fn f1_scores(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<F1Scores> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(EvcError::invalid("F1 needs equally many predictions and labels, at least one"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(EvcError::invalid("class index out of range"));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>() as f64;
    let f1 = |tp: f64, fp: f64, fnn: f64| if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
    let micro = f1(sum(&tp), sum(&fp), sum(&fneg));
    let macro_ = (0..n_classes)
        .map(|k| f1(tp[k] as f64, fp[k] as f64, fneg[k] as f64))
        .sum::<f64>()
        / n_classes as f64;
    Ok(F1Scores {
        micro: 100.0 * micro,
        macro_: 100.0 * macro_,
    })
}

/// Aggregated scores of one training-set variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub train_size: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub micro_f1_std: f64,
    pub macro_f1_std: f64,
    pub trials: usize,
    pub per_trial: Vec<F1Scores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationResult {
    pub labels: Vec<String>,
    pub variants: Vec<VariantResult>,
    pub standardizer: WaveStandardizer,
    pub seed: u64,
    pub config_hash: String,
}

impl AugmentationResult {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == name)
    }

    /// Checks ranges: every F1 in `[0, 100]`, every std non-negative, trial counts consistent.
    pub fn validate(&self) -> Result<()> {
        for v in &self.variants {
            let in_range = |x: f64| (0.0..=100.0).contains(&x);
            let ok = in_range(v.micro_f1)
                && in_range(v.macro_f1)
                && v.micro_f1_std >= 0.0
                && v.macro_f1_std >= 0.0
                && v.per_trial.len() == v.trials
                && v.per_trial.iter().all(|s| in_range(s.micro) && in_range(s.macro_));
            if !ok {
                return Err(EvcError::data(format!("variant `{}` has out-of-range scores", v.variant)));
            }
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Training-set variant: a name and the extra utterances added to the real training data.
pub struct Variant<'a> {
    pub name: String,
    pub extra: Vec<LabeledWave<'a>>,
}

/// Trains `trials` recognisers per variant and scores them on `test`.
/// Standardisation statistics come from the real training audio only.
#[allow(clippy::too_many_arguments)]
pub fn augmentation_experiment(
    real_train: &[LabeledWave],
    variants: &[Variant],
    val: &[LabeledWave],
    test: &[LabeledWave],
    labels: &[String],
    eval: &EvalConfig,
    trials: usize,
    seed: u64,
    config_hash: &str,
) -> Result<AugmentationResult> {
    if trials == 0 {
        return Err(EvcError::config("augmentation experiment needs at least one trial"));
    }
    if test.is_empty() {
        return Err(EvcError::data("augmentation experiment needs a non-empty test set"));
    }
    let standardizer = WaveStandardizer::fit(real_train.iter().map(|d| d.samples))?;
    let arch = SerArch::from_config(eval, labels.len());
    let test_x = fixed_examples(test, &arch.input, &standardizer, seed ^ 0x7E57)?;
    let truth: Vec<usize> = test.iter().map(|d| d.label).collect();
    let mut results = Vec::new();
    let real = Variant {
        name: "real".into(),
        extra: Vec::new(),
    };
    for v in std::iter::once(&real).chain(variants) {
        let train: Vec<LabeledWave> = real_train.iter().chain(&v.extra).copied().collect();
        let mut per_trial = Vec::with_capacity(trials);
        for t in 0..trials {
            let opts = SerTraining::from_config(eval, seed.wrapping_add(t as u64));
            let model = train_ser(&train, val, arch.clone(), standardizer, &opts)?;
            per_trial.push(f1_scores(&model.predict(&test_x)?, &truth, labels.len())?);
        }
        let (micro_f1, micro_f1_std) = mean_std(&per_trial.iter().map(|s| s.micro).collect::<Vec<_>>());
        let (macro_f1, macro_f1_std) = mean_std(&per_trial.iter().map(|s| s.macro_).collect::<Vec<_>>());
        info!("SER variant {}: micro {micro_f1:.2} macro {macro_f1:.2}", v.name);
        results.push(VariantResult {
            variant: v.name.clone(),
            train_size: train.len(),
            micro_f1,
            macro_f1,
            micro_f1_std,
            macro_f1_std,
            trials,
            per_trial,
        });
    }
    let out = AugmentationResult {
        labels: labels.to_vec(),
        variants: results,
        standardizer,
        seed,
        config_hash: config_hash.to_string(),
    };
    out.validate()?;
    Ok(out)
}
