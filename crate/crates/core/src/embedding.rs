//! Convolutional emotion classifier over mel-cepstral chunks, its training
//! loop, continuous emotion embeddings and class-mean embeddings.
//!
//! The same network family serves as the frozen emotion encoder and as the
//! trainable domain classifier of the second training stage.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, DType};
use crate::config::{EmbeddingSource, ToolkitConfig};
use crate::data::{random_crop, stack};
use crate::error::{EvcError, Result};
use crate::nn::{argmax_rows, cross_entropy, softmax_rows, Adam, AdamConfig, Bound, GluConv, Linear, ParamSet, Seq};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub in_dim: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub embedding_dim: usize,
    pub n_classes: usize,
}

impl ClassifierArch {
    pub fn from_config(cfg: &ToolkitConfig) -> Self {
        ClassifierArch {
            in_dim: cfg.data.mcep_order,
            channels: cfg.model.classifier_channels.clone(),
            kernels: cfg.model.classifier_kernels.clone(),
            strides: cfg.model.classifier_strides.clone(),
            embedding_dim: cfg.model.embedding_dim,
            n_classes: cfg.data.labels.len(),
        }
    }

    /// Shortest accepted input.
    pub fn min_len(&self) -> usize {
        self.strides.iter().product::<usize>().max(1)
    }
}

/// GLU convolutions, a per-frame `tanh` projection to the embedding size,
/// mean pooling over time (the embedding) and a linear head (the logits).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvClassifier {
    pub arch: ClassifierArch,
    convs: Vec<GluConv>,
    frame: Linear,
    head: Linear,
}

pub struct ClassifierOutput {
    pub embedding: Var,
    pub logits: Var,
}

impl ConvClassifier {
    pub fn new(arch: ClassifierArch, prefix: &str, rng: &mut ChaCha8Rng) -> (Self, ParamSet) {
        let mut ps = ParamSet::new();
        let mut c = arch.in_dim;
        let mut convs = Vec::new();
        for (i, ((&ch, &k), &s)) in arch.channels.iter().zip(&arch.kernels).zip(&arch.strides).enumerate() {
            convs.push(GluConv::new(&mut ps, rng, &format!("{prefix}.conv{i}"), c, ch, k, s));
            c = ch;
        }
        let frame = Linear::new(&mut ps, rng, &format!("{prefix}.frame"), c, arch.embedding_dim);
        let head = Linear::new(&mut ps, rng, &format!("{prefix}.head"), arch.embedding_dim, arch.n_classes);
        (
            ConvClassifier {
                arch,
                convs,
                frame,
                head,
            },
            ps,
        )
    }

    pub fn forward(&self, p: &Bound, x: &Seq) -> Result<ClassifierOutput> {
        if x.channels() != self.arch.in_dim {
            return Err(EvcError::invalid(format!(
                "classifier expects {} coefficients, got {}",
                self.arch.in_dim,
                x.channels()
            )));
        }
        if x.len < self.arch.min_len() {
            return Err(EvcError::invalid(format!(
                "chunk of {} frames shorter than classifier minimum {}",
                x.len,
                self.arch.min_len()
            )));
        }
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(p, &h)?;
        }
        let frames = h.map(|v| self.frame.forward(p, v).tanh());
        let embedding = frames.time_mean();
        let logits = self.head.forward(p, &embedding);
        Ok(ClassifierOutput { embedding, logits })
    }
}

fn seq_of(tape: &Tape, chunks: &[Mat]) -> Seq {
    let len = chunks[0].nrows();
    Seq::new(tape.constant(stack(chunks)), chunks.len(), len)
}

/// The frozen emotion encoder: classifier, its parameters and label set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionClassifier {
    pub net: ConvClassifier,
    pub params: ParamSet,
    pub labels: Vec<String>,
    pub source: EmbeddingSource,
    pub train_accuracy: f64,
    pub seed: u64,
}

impl EmotionClassifier {
    pub fn embedding_dim(&self) -> usize {
        match self.source {
            EmbeddingSource::Penultimate => self.net.arch.embedding_dim,
            EmbeddingSource::Softmax => self.labels.len(),
        }
    }

    /// Embeddings for a batch on `tape`, as constants.
    pub fn embed_seq(&self, tape: &Tape, x: &Seq) -> Result<Var> {
        let p = self.params.bind(tape, false);
        let out = self.net.forward(&p, x)?;
        Ok(match self.source {
            EmbeddingSource::Penultimate => out.embedding,
            EmbeddingSource::Softmax => tape.constant(softmax_rows(&out.logits.value())),
        })
    }

    /// Embedding of one normalised chunk `T x in_dim`.
    pub fn embed(&self, chunk: &Mat) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = Seq::new(tape.constant(chunk.clone()), 1, chunk.nrows());
        if chunk.ncols() != self.net.arch.in_dim {
            return Err(EvcError::invalid(format!(
                "chunk has {} columns, expected {}",
                chunk.ncols(),
                self.net.arch.in_dim
            )));
        }
        Ok(self.embed_seq(&tape, &x)?.value().row(0).to_vec())
    }

    /// Class probabilities of one chunk.
    pub fn probabilities(&self, chunk: &Mat) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = Seq::new(tape.constant(chunk.clone()), 1, chunk.nrows());
        let out = self.net.forward(&self.params.bind(&tape, false), &x)?;
        Ok(softmax_rows(&out.logits.value()).row(0).to_vec())
    }

    pub fn predict(&self, chunk: &Mat) -> Result<usize> {
        let p = self.probabilities(chunk)?;
        Ok(argmax_rows(&Mat::from_shape_vec((1, p.len()), p).expect("row")).remove(0))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut a = Archive::new(json!({
            "kind": "emotion-classifier",
            "arch": self.net,
            "labels": self.labels,
            "source": self.source,
            "train_accuracy": self.train_accuracy,
            "seed": self.seed,
            "config_hash": config_hash,
        }));
        for (n, v) in self.params.iter() {
            a.push(n, DType::F64, v.clone());
        }
        a.write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let a = Archive::read(path)?;
        let bad = |m: String| EvcError::Load {
            path: path.to_path_buf(),
            message: m,
        };
        if a.meta["kind"] != "emotion-classifier" {
            return Err(bad("not an emotion classifier checkpoint".into()));
        }
        let net: ConvClassifier = serde_json::from_value(a.meta["arch"].clone()).map_err(|e| bad(e.to_string()))?;
        let (_, mut params) = ConvClassifier::new(net.arch.clone(), "cls", &mut ChaCha8Rng::seed_from_u64(0));
        params.load_from(a.arrays())?;
        let get = |k: &str| a.meta[k].clone();
        let out = EmotionClassifier {
            net,
            params,
            labels: serde_json::from_value(get("labels")).map_err(|e| bad(e.to_string()))?,
            source: serde_json::from_value(get("source")).map_err(|e| bad(e.to_string()))?,
            train_accuracy: get("train_accuracy").as_f64().unwrap_or(0.0),
            seed: get("seed").as_u64().unwrap_or(0),
        };
        Ok((out, get("config_hash").as_str().unwrap_or_default().to_string()))
    }
}

/// A normalised utterance with its class index.
#[derive(Clone, Copy, Debug)]
pub struct LabeledMcep<'a> {
    pub mcep: &'a Mat,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub chunk_len: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl ClassifierTraining {
    pub fn from_config(cfg: &ToolkitConfig) -> Self {
        ClassifierTraining {
            steps: cfg.optim.classifier_steps,
            batch_size: cfg.optim.batch_size,
            chunk_len: cfg.model.chunk_len,
            adam: cfg.optim.classifier_adam(),
            seed: cfg.seed,
        }
    }
}

/// Indices per class; fails if any class has no member.
pub(crate) fn members_per_class(labels: &[String], items: impl Iterator<Item = usize>) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); labels.len()];
    for (i, l) in items.enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| EvcError::config(format!("class index {l} out of range")))?
            .push(i);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(EvcError::config(format!("emotion `{}` has no training utterances", labels[k])));
    }
    Ok(by_class)
}

/// Class-balanced batch: slot `b` takes class `(offset + b) mod K`.
pub(crate) fn balanced_batch(
    by_class: &[Vec<usize>],
    batch: usize,
    offset: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    (0..batch)
        .map(|b| {
            let members = &by_class[(offset + b) % by_class.len()];
            members[rng.gen_range(0..members.len())]
        })
        .collect()
}

/// Fraction of whole utterances classified correctly.
pub fn accuracy(clf: &EmotionClassifier, data: &[LabeledMcep]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for d in data {
        if clf.predict(d.mcep)? == d.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains the emotion classifier with cross-entropy on random crops.
pub fn train_classifier(
    data: &[LabeledMcep],
    labels: &[String],
    arch: ClassifierArch,
    source: EmbeddingSource,
    opts: &ClassifierTraining,
) -> Result<EmotionClassifier> {
    if labels.len() < 2 {
        return Err(EvcError::config("emotion classifier needs at least two classes"));
    }
    if arch.n_classes != labels.len() {
        return Err(EvcError::config("classifier output count differs from label count"));
    }
    let by_class = members_per_class(labels, data.iter().map(|d| d.label))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC1A5_51F1);
    let (net, mut params) = ConvClassifier::new(arch, "cls", &mut rng);
    let mut adam = Adam::new(opts.adam, &params);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for step in 0..opts.steps {
        order.shuffle(&mut rng);
        let idx = balanced_batch(&by_class, opts.batch_size, order[0], &mut rng);
        let chunks: Vec<Mat> = idx
            .iter()
            .map(|&i| random_crop(data[i].mcep, opts.chunk_len, &mut rng))
            .collect();
        let targets: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let out = net.forward(&p, &seq_of(&tape, &chunks))?;
        let loss = cross_entropy(&out.logits, &targets);
        let l = loss.item();
        if !l.is_finite() {
            return Err(EvcError::TrainingDiverged {
                stage: 0,
                step,
                term: "classifier cross-entropy".into(),
            });
        }
        adam.update(&mut params, &p.grads(&loss));
        if step % 100 == 0 {
            debug!("classifier step {step}: loss {l:.4}");
        }
    }
    let mut clf = EmotionClassifier {
        net,
        params,
        labels: labels.to_vec(),
        source,
        train_accuracy: 0.0,
        seed: opts.seed,
    };
    clf.train_accuracy = accuracy(&clf, data)?;
    info!("emotion classifier: train accuracy {:.3}", clf.train_accuracy);
    Ok(clf)
}

/// Arithmetic mean, summed in order from the first vector.
pub fn mean_embedding(embs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (first, rest) = embs
        .split_first()
        .ok_or_else(|| EvcError::stats("cannot average zero embeddings"))?;
    let mut sum = first.clone();
    for e in rest {
        if e.len() != sum.len() {
            return Err(EvcError::invalid("embedding sizes differ"));
        }
        for (s, x) in sum.iter_mut().zip(e) {
            *s += x;
        }
    }
    let n = embs.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Class-mean embeddings keyed by label.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeans {
    pub labels: Vec<String>,
    pub means: BTreeMap<String, Vec<f64>>,
}

impl ClassMeans {
    pub fn get(&self, label: &str) -> Result<&[f64]> {
        self.means
            .get(label)
            .map(Vec::as_slice)
            .ok_or_else(|| EvcError::config(format!("no class-mean embedding for `{label}`")))
    }

    pub fn dim(&self) -> usize {
        self.means.values().next().map_or(0, Vec::len)
    }

    /// Rows of class means for the given label indices: `(n, dim)`.
    pub fn rows(&self, label_idx: &[usize]) -> Result<Mat> {
        let d = self.dim();
        let mut m = Mat::zeros((label_idx.len(), d));
        for (r, &l) in label_idx.iter().enumerate() {
            let name = self
                .labels
                .get(l)
                .ok_or_else(|| EvcError::config(format!("label index {l} out of range")))?;
            m.row_mut(r).assign(&ndarray::ArrayView1::from(self.get(name)?));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut a = Archive::new(json!({
            "kind": "class-means",
            "labels": self.labels,
            "config_hash": config_hash,
        }));
        for l in &self.labels {
            let v = self.get(l)?.to_vec();
            a.push(l.clone(), DType::F64, Mat::from_shape_vec((1, v.len()), v).expect("row"));
        }
        a.write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let a = Archive::read(path)?;
        let labels: Vec<String> = serde_json::from_value(a.meta["labels"].clone()).map_err(|e| EvcError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut means = BTreeMap::new();
        for l in &labels {
            means.insert(l.clone(), a.require(l)?.row(0).to_vec());
        }
        let hash = a.meta["config_hash"].as_str().unwrap_or_default().to_string();
        Ok((ClassMeans { labels, means }, hash))
    }
}

/// Mean utterance embedding per class over `data` (whole utterances).
pub fn class_means(clf: &EmotionClassifier, data: &[LabeledMcep]) -> Result<ClassMeans> {
    let mut per: Vec<Vec<Vec<f64>>> = vec![Vec::new(); clf.labels.len()];
    for d in data {
        per[d.label].push(clf.embed(d.mcep)?);
    }
    let mut means = BTreeMap::new();
    for (k, embs) in per.iter().enumerate() {
        let m = mean_embedding(embs)
            .map_err(|_| EvcError::stats(format!("emotion `{}` has no utterances for its class mean", clf.labels[k])))?;
        means.insert(clf.labels[k].clone(), m);
    }
    Ok(ClassMeans {
        labels: clf.labels.clone(),
        means,
    })
}
