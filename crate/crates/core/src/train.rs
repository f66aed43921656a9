//! The two training stages: autoencoder reconstruction through the
//! emotion-independent encoder, then many-to-many conversion with cycle
//! consistency and a domain classifier.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ToolkitConfig;
use crate::data::{random_crop, stack};
use crate::embedding::{members_per_class, ClassMeans, EmotionClassifier};
use crate::error::{EvcError, Result};
use crate::nn::{Adam, AdamConfig, Seq};
use crate::stargan::{
    convert, domain_classifier_terms, save_checkpoint, stage1_discriminator_terms, stage1_generator_terms,
    stage2_discriminator_terms, stage2_generator_terms, CheckpointMeta, LossWeights, StarGan, StarGanParams, Terms,
};
use crate::tape::{Mat, Tape};

/// Normalised training utterances and their class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub labels: Vec<String>,
    pub mceps: Vec<Mat>,
    pub classes: Vec<usize>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.mceps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mceps.is_empty()
    }
}

/// Endless stream of class-interleaved utterance indices.
struct Sampler {
    by_class: Vec<Vec<usize>>,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(set: &TrainingSet) -> Result<Self> {
        let by_class = members_per_class(&set.labels, set.classes.iter().copied())?;
        Ok(Sampler {
            by_class,
            order: Vec::new(),
            pos: 0,
        })
    }

    fn refill(&mut self, rng: &mut ChaCha8Rng) {
        let mut lists = self.by_class.clone();
        for l in &mut lists {
            l.shuffle(rng);
        }
        let mut classes: Vec<usize> = (0..lists.len()).collect();
        classes.shuffle(rng);
        self.order.clear();
        let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..longest {
            for &c in &classes {
                if let Some(&u) = lists[c].get(i) {
                    self.order.push(u);
                }
            }
        }
        self.pos = 0;
    }

    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos >= self.order.len() {
                    self.refill(rng);
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn crops(set: &TrainingSet, idx: &[usize], len: usize, rng: &mut ChaCha8Rng) -> Mat {
    let chunks: Vec<Mat> = idx.iter().map(|&i| random_crop(&set.mceps[i], len, rng)).collect();
    stack(&chunks)
}

fn eps_draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// Update counters per network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub d: usize,
    pub c: usize,
    pub g: usize,
}

/// One logged step: a generator update and the critic updates preceding it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub counters: Counters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_losses: BTreeMap<String, f64>,
    pub updates: Counters,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub counters: Counters,
    pub classifier_checksum_before: String,
    pub classifier_checksum_after: String,
    pub stop_reason: String,
    /// Excluded from [`TrainingLog::deterministic_eq`].
    pub wall_time_secs: f64,
}

impl TrainingLog {
    /// Equality ignoring wall time.
    pub fn deterministic_eq(&self, other: &TrainingLog) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        a == *other
    }

    /// Steps as JSON lines, plus a summary document with epochs and wall time.
    pub fn write(&self, jsonl: &Path, summary: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for s in &self.steps {
            serde_json::to_writer(&mut buf, s)?;
            buf.write_all(b"\n")?;
        }
        crate::archive::write_atomic(jsonl, &buf)?;
        let mut doc = self.clone();
        doc.steps.clear();
        crate::archive::write_atomic(summary, serde_json::to_string_pretty(&doc)?.as_bytes())
    }

    fn close_epoch(&mut self, epoch: usize, first_step: usize, before: Counters) {
        let recs = &self.steps[first_step..];
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for r in recs {
            for (k, v) in &r.losses {
                *sums.entry(k.clone()).or_default() += v;
            }
        }
        let n = recs.len().max(1) as f64;
        self.epochs.push(EpochRecord {
            epoch,
            mean_losses: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            updates: Counters {
                d: self.counters.d - before.d,
                c: self.counters.c - before.c,
                g: self.counters.g - before.g,
            },
        });
    }
}

fn prefixed(prefix: &str, t: &Terms, into: &mut BTreeMap<String, f64>) {
    for (k, v) in t.values() {
        into.insert(format!("{prefix}.{k}"), v);
    }
}

fn ensure_finite(
    t: &Terms,
    stage: u8,
    step: usize,
    last_good: Option<(&Path, &StarGan, &StarGanParams, &CheckpointMeta)>,
) -> Result<()> {
    if let Some(term) = t.non_finite() {
        if let Some((path, gan, params, meta)) = last_good {
            warn!("stage {stage} diverged at step {step}; writing last good parameters to {}", path.display());
            save_checkpoint(path, gan, params, meta)?;
        }
        return Err(EvcError::TrainingDiverged { stage, step, term });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Options {
    pub epochs: usize,
    /// Stops after this many steps even inside an epoch.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub chunk_len: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub config_hash: String,
    pub last_good_path: Option<PathBuf>,
}

impl Stage1Options {
    pub fn from_config(cfg: &ToolkitConfig) -> Self {
        Stage1Options {
            epochs: cfg.stage1.epochs,
            max_steps: None,
            batch_size: cfg.optim.batch_size,
            chunk_len: cfg.model.chunk_len,
            adam: cfg.optim.adam(),
            weights: LossWeights::stage1(cfg),
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            last_good_path: None,
        }
    }

    /// Generator steps in one epoch: one crop per utterance.
    pub fn steps_per_epoch(&self, n_utterances: usize) -> usize {
        n_utterances.div_ceil(self.batch_size).max(1)
    }
}

pub struct TrainOutcome {
    pub params: StarGanParams,
    pub meta: CheckpointMeta,
    pub log: TrainingLog,
}

/// Stage 1: the generator reconstructs each chunk from its own latent code and
/// its embedding under the frozen encoder; the critic sees real against reconstructed.
/// Target emotions are never consulted.
pub fn train_stage1(
    set: &TrainingSet,
    encoder: &EmotionClassifier,
    gan: &StarGan,
    mut params: StarGanParams,
    opts: &Stage1Options,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5747_4531);
    let mut sampler = Sampler::new(set)?;
    let mut adam_g = Adam::new(opts.adam, &params.gen);
    let mut adam_d = Adam::new(opts.adam, &params.disc);
    let mut log = TrainingLog {
        classifier_checksum_before: encoder.params.checksum(),
        ..TrainingLog::default()
    };
    let per_epoch = opts.steps_per_epoch(set.len());
    let total = opts.max_steps.map_or(per_epoch * opts.epochs, |m| m.min(per_epoch * opts.epochs));
    let mut meta = CheckpointMeta {
        stage: 1,
        step: 0,
        epoch: 0,
        seed: opts.seed,
        weights: opts.weights,
        config_hash: opts.config_hash.clone(),
    };
    let b = opts.batch_size;
    let len = opts.chunk_len;
    let mut step = 0;
    'epochs: for epoch in 0..opts.epochs {
        let first = log.steps.len();
        let before = log.counters;
        for _ in 0..per_epoch {
            if step >= total {
                log.close_epoch(epoch, first, before);
                break 'epochs;
            }
            let idx = sampler.next_batch(&mut rng, b);
            let x_val = crops(set, &idx, len, &mut rng);
            let eps = eps_draw(&mut rng, b);
            let mut losses = BTreeMap::new();
            let last_good = opts.last_good_path.as_deref().map(|p| (p, gan, &params, &meta));

            let tape = Tape::new();
            let x = Seq::new(tape.constant(x_val.clone()), b, len);
            let e = encoder.embed_seq(&tape, &x)?;
            let g = params.gen.bind(&tape, false);
            let d = params.disc.bind(&tape, true);
            let dt = stage1_discriminator_terms(gan, &g, &d, &x, &e, &opts.weights, &eps)?;
            ensure_finite(&dt, 1, step, last_good)?;
            let d_grads = d.grads(&dt.total);
            prefixed("d", &dt, &mut losses);

            let tape = Tape::new();
            let x = Seq::new(tape.constant(x_val), b, len);
            let e = encoder.embed_seq(&tape, &x)?;
            let g = params.gen.bind(&tape, true);
            let d = params.disc.bind(&tape, false);
            let gt = stage1_generator_terms(gan, &g, &d, &x, &e, &opts.weights)?;
            ensure_finite(&gt, 1, step, last_good)?;
            let g_grads = g.grads(&gt.total);
            prefixed("g", &gt, &mut losses);

            adam_d.update(&mut params.disc, &d_grads);
            adam_g.update(&mut params.gen, &g_grads);
            log.counters.d += 1;
            log.counters.g += 1;
            if step % 50 == 0 {
                debug!("stage 1 step {step}: rec {:.4}", losses["g.rec"]);
            }
            log.steps.push(StepRecord {
                stage: 1,
                step,
                epoch,
                losses,
                counters: log.counters,
            });
            step += 1;
            meta.step = step;
            meta.epoch = epoch + 1;
        }
        log.close_epoch(epoch, first, before);
    }
    log.stop_reason = if step >= per_epoch * opts.epochs {
        "epochs".into()
    } else {
        "max_steps".into()
    };
    log.classifier_checksum_after = encoder.params.checksum();
    log.wall_time_secs = start.elapsed().as_secs_f64();
    info!("stage 1 finished after {step} steps");
    Ok(TrainOutcome { params, meta, log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Options {
    pub max_epochs: usize,
    pub plateau_window: usize,
    pub plateau_min_rel_improvement: f64,
    pub critic_updates_per_gen: usize,
    pub gen_steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub chunk_len: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub reinit_discriminator: bool,
    pub seed: u64,
    pub config_hash: String,
    pub last_good_path: Option<PathBuf>,
}

impl Stage2Options {
    pub fn from_config(cfg: &ToolkitConfig) -> Self {
        Stage2Options {
            max_epochs: cfg.stage2.max_epochs,
            plateau_window: cfg.stage2.plateau_window,
            plateau_min_rel_improvement: cfg.stage2.plateau_min_rel_improvement,
            critic_updates_per_gen: cfg.optim.critic_updates_per_gen,
            gen_steps_per_epoch: cfg.stage2.gen_steps_per_epoch,
            batch_size: cfg.optim.batch_size,
            chunk_len: cfg.model.chunk_len,
            adam: cfg.optim.adam(),
            weights: LossWeights::stage2(cfg),
            reinit_discriminator: cfg.stage2.reinit_discriminator,
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            last_good_path: None,
        }
    }

    /// Generator steps per epoch: the configured value, or enough that all
    /// batches of one pass are spread over critic and generator updates.
    pub fn gen_steps(&self, n_utterances: usize) -> usize {
        self.gen_steps_per_epoch.unwrap_or_else(|| {
            let batches = n_utterances.div_ceil(self.batch_size);
            batches.div_ceil(self.critic_updates_per_gen + 1).max(1)
        })
    }
}

/// Relative improvement of the last window's mean over the one before.
pub fn plateau_reached(history: &[f64], window: usize, min_rel: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&history[n - 2 * window..n - window]);
    let last = mean(&history[n - window..]);
    let improvement = (prev - last) / prev.abs().max(1e-12);
    improvement < min_rel
}

fn draw_targets(rng: &mut ChaCha8Rng, src: &[usize], k: usize) -> Vec<usize> {
    src.iter()
        .map(|&s| {
            let r = rng.gen_range(0..k - 1);
            if r >= s {
                r + 1
            } else {
                r
            }
        })
        .collect()
}

/// Stage 2: per generator step, `critic_updates_per_gen` discriminator and
/// domain-classifier updates on fresh batches, then one generator update.
pub fn train_stage2(
    set: &TrainingSet,
    means: &ClassMeans,
    encoder: &EmotionClassifier,
    gan: &StarGan,
    mut params: StarGanParams,
    opts: &Stage2Options,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let k = set.labels.len();
    for l in &set.labels {
        means.get(l)?;
    }
    if means.dim() != gan.arch.generator.cond_dim {
        return Err(EvcError::config(format!(
            "class means have {} dims, generator expects {}",
            means.dim(),
            gan.arch.generator.cond_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5747_4532);
    if opts.reinit_discriminator {
        params.disc = gan.fresh_discriminator(opts.seed);
    }
    let mut sampler = Sampler::new(set)?;
    let mut adam_g = Adam::new(opts.adam, &params.gen);
    let mut adam_d = Adam::new(opts.adam, &params.disc);
    let mut adam_c = Adam::new(opts.adam, &params.cls);
    let mut log = TrainingLog {
        classifier_checksum_before: encoder.params.checksum(),
        ..TrainingLog::default()
    };
    let g_steps = opts.gen_steps(set.len());
    let b = opts.batch_size;
    let len = opts.chunk_len;
    let mut meta = CheckpointMeta {
        stage: 2,
        step: 0,
        epoch: 0,
        seed: opts.seed,
        weights: opts.weights,
        config_hash: opts.config_hash.clone(),
    };
    let mut history = Vec::new();
    let mut step = 0;
    log.stop_reason = "max_epochs".into();
    for epoch in 0..opts.max_epochs {
        let first = log.steps.len();
        let before = log.counters;
        for _ in 0..g_steps {
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            for _ in 0..opts.critic_updates_per_gen {
                let idx = sampler.next_batch(&mut rng, b);
                let src: Vec<usize> = idx.iter().map(|&i| set.classes[i]).collect();
                let tgt = draw_targets(&mut rng, &src, k);
                let x_val = crops(set, &idx, len, &mut rng);
                let eps = eps_draw(&mut rng, b);
                let last_good = opts.last_good_path.as_deref().map(|p| (p, gan, &params, &meta));

                let tape = Tape::new();
                let x = Seq::new(tape.constant(x_val), b, len);
                let e_src = tape.constant(means.rows(&src)?);
                let e_tgt = tape.constant(means.rows(&tgt)?);
                let g = params.gen.bind(&tape, false);
                let d = params.disc.bind(&tape, true);
                let c = params.cls.bind(&tape, true);
                let dt = stage2_discriminator_terms(gan, &g, &d, &x, &e_src, &e_tgt, &opts.weights, &eps)?;
                ensure_finite(&dt, 2, step, last_good)?;
                let ct = domain_classifier_terms(gan, &c, &x, &src)?;
                ensure_finite(&ct, 2, step, last_good)?;
                let dg = d.grads(&dt.total);
                let cg = c.grads(&ct.total);
                adam_d.update(&mut params.disc, &dg);
                log.counters.d += 1;
                adam_c.update(&mut params.cls, &cg);
                log.counters.c += 1;
                let mut l = BTreeMap::new();
                prefixed("d", &dt, &mut l);
                prefixed("c", &ct, &mut l);
                for (key, v) in l {
                    *sums.entry(key).or_default() += v / opts.critic_updates_per_gen as f64;
                }
            }

            let idx = sampler.next_batch(&mut rng, b);
            let src: Vec<usize> = idx.iter().map(|&i| set.classes[i]).collect();
            let tgt = draw_targets(&mut rng, &src, k);
            let x_val = crops(set, &idx, len, &mut rng);
            let last_good = opts.last_good_path.as_deref().map(|p| (p, gan, &params, &meta));
            let tape = Tape::new();
            let x = Seq::new(tape.constant(x_val), b, len);
            let e_src = tape.constant(means.rows(&src)?);
            let e_tgt = tape.constant(means.rows(&tgt)?);
            let g = params.gen.bind(&tape, true);
            let d = params.disc.bind(&tape, false);
            let c = params.cls.bind(&tape, false);
            let gt = stage2_generator_terms(gan, &g, &d, &c, &x, &e_src, &e_tgt, &tgt, &opts.weights)?;
            ensure_finite(&gt, 2, step, last_good)?;
            let gg = g.grads(&gt.total);
            adam_g.update(&mut params.gen, &gg);
            log.counters.g += 1;
            prefixed("g", &gt, &mut sums);
            log.steps.push(StepRecord {
                stage: 2,
                step,
                epoch,
                losses: sums,
                counters: log.counters,
            });
            step += 1;
            meta.step = step;
        }
        meta.epoch = epoch + 1;
        log.close_epoch(epoch, first, before);
        let g_total = log.epochs.last().and_then(|e| e.mean_losses.get("g.total").copied()).unwrap_or(0.0);
        debug!("stage 2 epoch {epoch}: g.total {g_total:.4}");
        history.push(g_total);
        if plateau_reached(&history, opts.plateau_window, opts.plateau_min_rel_improvement) {
            log.stop_reason = format!("plateau after {} epochs", epoch + 1);
            break;
        }
    }
    log.classifier_checksum_after = encoder.params.checksum();
    log.wall_time_secs = start.elapsed().as_secs_f64();
    info!("stage 2 finished: {} ({} generator steps)", log.stop_reason, step);
    Ok(TrainOutcome { params, meta, log })
}

/// Mean L1 between each utterance and its reconstruction under its own embedding.
pub fn reconstruction_l1(gan: &StarGan, params: &StarGanParams, encoder: &EmotionClassifier, set: &TrainingSet) -> Result<f64> {
    let mut total = 0.0;
    for m in &set.mceps {
        let e = encoder.embed(m)?;
        let y = convert(gan, &params.gen, m, &e)?;
        total += (&y - m).mapv(f64::abs).mean().unwrap_or(0.0);
    }
    Ok(total / set.len().max(1) as f64)
}

/// Mean cycle L1 over every utterance and every other target class.
pub fn cycle_l1(gan: &StarGan, params: &StarGanParams, means: &ClassMeans, set: &TrainingSet) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (m, &c) in set.mceps.iter().zip(&set.classes) {
        for t in 0..set.labels.len() {
            if t == c {
                continue;
            }
            let (_, back) = crate::stargan::cycle(gan, &params.gen, m, means.get(&set.labels[c])?, means.get(&set.labels[t])?)?;
            total += (&back - m).mapv(f64::abs).mean().unwrap_or(0.0);
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Domain-classifier accuracy on whole real utterances.
pub fn domain_accuracy(gan: &StarGan, params: &StarGanParams, set: &TrainingSet) -> Result<f64> {
    let mut hits = 0;
    for (m, &c) in set.mceps.iter().zip(&set.classes) {
        let tape = Tape::new();
        let x = Seq::new(tape.constant(m.clone()), 1, m.nrows());
        let out = gan.cls.forward(&params.cls.bind(&tape, false), &x)?;
        if crate::nn::argmax_rows(&out.logits.value())[0] == c {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_rule() {
        let flat = vec![1.0; 40];
        assert!(plateau_reached(&flat, 20, 0.01));
        let falling: Vec<f64> = (0..40).map(|i| 10.0 - 0.2 * i as f64).collect();
        assert!(!plateau_reached(&falling, 20, 0.01));
        assert!(!plateau_reached(&flat[..39], 20, 0.01));
    }

    #[test]
    fn targets_exclude_source_and_cover_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = vec![1; 300];
        let t = draw_targets(&mut rng, &src, 3);
        assert!(t.iter().all(|&x| x != 1));
        assert!(t.contains(&0) && t.contains(&2));
    }

    #[test]
    fn sampler_interleaves_classes() {
        let set = TrainingSet {
            labels: vec!["a".into(), "b".into(), "c".into()],
            mceps: vec![Mat::zeros((1, 1)); 6],
            classes: vec![0, 0, 1, 1, 2, 2],
        };
        let mut s = Sampler::new(&set).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = s.next_batch(&mut rng, 3);
        let mut cls: Vec<usize> = b.iter().map(|&i| set.classes[i]).collect();
        cls.sort();
        assert_eq!(cls, vec![0, 1, 2]);
    }

    #[test]
    fn gen_steps_default() {
        let mut o = Stage2Options {
            max_epochs: 1,
            plateau_window: 20,
            plateau_min_rel_improvement: 0.01,
            critic_updates_per_gen: 5,
            gen_steps_per_epoch: None,
            batch_size: 4,
            chunk_len: 16,
            adam: AdamConfig::default(),
            weights: LossWeights {
                adversarial: crate::config::Adversarial::WganGp,
                lambda_rec: 0.0,
                lambda_gp: 10.0,
                lambda_cyc: 10.0,
                lambda_cls: 1.0,
            },
            reinit_discriminator: false,
            seed: 0,
            config_hash: String::new(),
            last_good_path: None,
        };
        assert_eq!(o.gen_steps(6), 1);
        assert_eq!(o.gen_steps(240), 10);
        o.gen_steps_per_epoch = Some(60);
        assert_eq!(o.gen_steps(6), 60);
    }
}
