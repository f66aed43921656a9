//! Generator (emotion-independent encoder and conditioned decoder),
//! discriminator, domain classifier and the loss terms of both training stages.
//!
//! All networks are 1-D convolutional over time with the cepstral
//! coefficients as channels. The emotion condition is a per-utterance vector
//! broadcast over time and concatenated to the decoder input of every layer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, DType};
use crate::config::{Adversarial, ToolkitConfig};
use crate::data::reflect_pad;
use crate::embedding::{ClassifierArch, ConvClassifier};
use crate::error::{EvcError, Result};
use crate::nn::{cross_entropy, l1_loss, Bound, Conv1d, GluConv, Linear, ParamSet, Seq};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub in_dim: usize,
    pub enc_channels: Vec<usize>,
    pub enc_kernels: Vec<usize>,
    pub enc_strides: Vec<usize>,
    pub latent_channels: usize,
    pub dec_channels: Vec<usize>,
    pub dec_kernel: usize,
    pub cond_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub in_dim: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub cond_dim: usize,
    pub conditioned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarGanArch {
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
    pub classifier: ClassifierArch,
}

impl StarGanArch {
    /// `cond_dim` is the emotion embedding size of the frozen encoder.
    pub fn from_config(cfg: &ToolkitConfig, cond_dim: usize) -> Self {
        let m = &cfg.model;
        let in_dim = cfg.data.mcep_order;
        StarGanArch {
            generator: GeneratorArch {
                in_dim,
                enc_channels: m.enc_channels.clone(),
                enc_kernels: m.enc_kernels.clone(),
                enc_strides: m.enc_strides.clone(),
                latent_channels: m.latent_channels,
                dec_channels: m.dec_channels.clone(),
                dec_kernel: m.dec_kernel,
                cond_dim,
            },
            discriminator: DiscriminatorArch {
                in_dim,
                channels: m.disc_channels.clone(),
                kernels: m.disc_kernels.clone(),
                strides: m.disc_strides.clone(),
                cond_dim,
                conditioned: m.disc_conditioned,
            },
            classifier: ClassifierArch::from_config(cfg),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub arch: GeneratorArch,
    enc: Vec<GluConv>,
    latent: Conv1d,
    dec: Vec<GluConv>,
    out: Conv1d,
}

impl Generator {
    pub fn new(arch: GeneratorArch, rng: &mut ChaCha8Rng) -> (Self, ParamSet) {
        assert_eq!(arch.dec_channels.len(), arch.enc_strides.len(), "decoder must mirror encoder");
        let mut ps = ParamSet::new();
        let mut c = arch.in_dim;
        let mut enc = Vec::new();
        for (i, ((&ch, &k), &s)) in arch
            .enc_channels
            .iter()
            .zip(&arch.enc_kernels)
            .zip(&arch.enc_strides)
            .enumerate()
        {
            enc.push(GluConv::new(&mut ps, rng, &format!("gen.enc{i}"), c, ch, k, s));
            c = ch;
        }
        let latent = Conv1d::new(&mut ps, rng, "gen.latent", c, arch.latent_channels, arch.dec_kernel, 1);
        c = arch.latent_channels;
        let mut dec = Vec::new();
        for (i, &ch) in arch.dec_channels.iter().enumerate() {
            dec.push(GluConv::new(
                &mut ps,
                rng,
                &format!("gen.dec{i}"),
                c + arch.cond_dim,
                ch,
                arch.dec_kernel,
                1,
            ));
            c = ch;
        }
        let out = Conv1d::new(&mut ps, rng, "gen.out", c + arch.cond_dim, arch.in_dim, arch.dec_kernel, 1);
        (
            Generator {
                arch,
                enc,
                latent,
                dec,
                out,
            },
            ps,
        )
    }

    /// Product of the encoder time strides.
    pub fn time_factor(&self) -> usize {
        self.arch.enc_strides.iter().product()
    }

    /// The emotion-independent latent code, with time downsampled by [`Generator::time_factor`].
    pub fn encode(&self, p: &Bound, x: &Seq) -> Result<Seq> {
        let f = self.time_factor();
        if x.channels() != self.arch.in_dim {
            return Err(EvcError::invalid(format!(
                "generator expects {} coefficients, got {}",
                self.arch.in_dim,
                x.channels()
            )));
        }
        if x.len < f || x.len % f != 0 {
            return Err(EvcError::invalid(format!(
                "chunk of {} frames must be a positive multiple of {f}",
                x.len
            )));
        }
        let mut h = x.clone();
        for l in &self.enc {
            h = l.forward(p, &h)?;
        }
        self.latent.forward(p, &h)
    }

    pub fn decode(&self, p: &Bound, z: &Seq, cond: &Var) -> Result<Seq> {
        if cond.shape() != (z.batch, self.arch.cond_dim) {
            return Err(EvcError::invalid(format!(
                "condition has shape {:?}, expected ({}, {})",
                cond.shape(),
                z.batch,
                self.arch.cond_dim
            )));
        }
        if z.channels() != self.arch.latent_channels {
            return Err(EvcError::invalid("latent channel count mismatch"));
        }
        let mut h = z.clone();
        for (l, &up) in self.dec.iter().zip(self.arch.enc_strides.iter().rev()) {
            h = l.forward(p, &h.concat_condition(cond))?;
            if up > 1 {
                h = h.upsample(up);
            }
        }
        self.out.forward(p, &h.concat_condition(cond))
    }

    pub fn forward(&self, p: &Bound, x: &Seq, cond: &Var) -> Result<Seq> {
        let z = self.encode(p, x)?;
        self.decode(p, &z, cond)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    convs: Vec<GluConv>,
    out: Linear,
    proj: Option<Linear>,
}

impl Discriminator {
    pub fn new(arch: DiscriminatorArch, rng: &mut ChaCha8Rng) -> (Self, ParamSet) {
        let mut ps = ParamSet::new();
        let mut c = arch.in_dim;
        let mut convs = Vec::new();
        for (i, ((&ch, &k), &s)) in arch.channels.iter().zip(&arch.kernels).zip(&arch.strides).enumerate() {
            convs.push(GluConv::new(&mut ps, rng, &format!("disc.conv{i}"), c, ch, k, s));
            c = ch;
        }
        let out = Linear::new(&mut ps, rng, "disc.out", c, 1);
        let proj = arch
            .conditioned
            .then(|| Linear::new_no_bias(&mut ps, rng, "disc.proj", arch.cond_dim, c));
        (
            Discriminator {
                arch,
                convs,
                out,
                proj,
            },
            ps,
        )
    }

    /// One score per sequence, `(batch, 1)`. The condition is ignored when unconditioned.
    pub fn forward(&self, p: &Bound, x: &Seq, cond: &Var) -> Result<Var> {
        let mut h = x.clone();
        for l in &self.convs {
            h = l.forward(p, &h)?;
        }
        let pooled = h.time_mean();
        let score = self.out.forward(p, &pooled);
        Ok(match &self.proj {
            Some(proj) => score.add(&pooled.mul(&proj.forward(p, cond)).sum_cols()),
            None => score,
        })
    }
}

/// The three trainable networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarGan {
    pub arch: StarGanArch,
    pub gen: Generator,
    pub disc: Discriminator,
    pub cls: ConvClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StarGanParams {
    pub gen: ParamSet,
    pub disc: ParamSet,
    pub cls: ParamSet,
}

impl StarGan {
    pub fn new(arch: StarGanArch, seed: u64) -> (Self, StarGanParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57A2_6A11);
        let (gen, gp) = Generator::new(arch.generator.clone(), &mut rng);
        let (disc, dp) = Discriminator::new(arch.discriminator.clone(), &mut rng);
        let (cls, cp) = ConvClassifier::new(arch.classifier.clone(), "dcls", &mut rng);
        (
            StarGan { arch, gen, disc, cls },
            StarGanParams {
                gen: gp,
                disc: dp,
                cls: cp,
            },
        )
    }

    /// Fresh discriminator parameters from `seed`.
    pub fn fresh_discriminator(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C_0001);
        Discriminator::new(self.arch.discriminator.clone(), &mut rng).1
    }
}

fn one_seq(tape: &Tape, m: &Mat) -> Seq {
    Seq::new(tape.constant(m.clone()), 1, m.nrows())
}

fn cond_row(tape: &Tape, e: &[f64]) -> Var {
    tape.constant(Mat::from_shape_vec((1, e.len()), e.to_vec()).expect("row"))
}

/// Latent code of one `T x in_dim` chunk (`T` a multiple of the stride product).
pub fn encode_independent(gan: &StarGan, gen: &ParamSet, mcep: &Mat) -> Result<Mat> {
    let tape = Tape::new();
    let z = gan.gen.encode(&gen.bind(&tape, false), &one_seq(&tape, mcep))?;
    Ok((*z.var.value()).clone())
}

pub fn decode(gan: &StarGan, gen: &ParamSet, latent: &Mat, emotion: &[f64]) -> Result<Mat> {
    let tape = Tape::new();
    let z = one_seq(&tape, latent);
    let y = gan.gen.decode(&gen.bind(&tape, false), &z, &cond_row(&tape, emotion))?;
    Ok((*y.var.value()).clone())
}

/// Generator pass on a full utterance of any length: reflect-padded up to a
/// multiple of the stride product, then trimmed back.
pub fn convert(gan: &StarGan, gen: &ParamSet, mcep: &Mat, emotion: &[f64]) -> Result<Mat> {
    let t = mcep.nrows();
    if t == 0 {
        return Err(EvcError::invalid("cannot convert an empty sequence"));
    }
    let f = gan.gen.time_factor();
    let padded = reflect_pad(mcep, t.div_ceil(f) * f);
    let latent = encode_independent(gan, gen, &padded)?;
    let y = decode(gan, gen, &latent, emotion)?;
    Ok(y.slice(ndarray::s![..t, ..]).to_owned())
}

/// Conversion to the target and back to the source.
pub fn cycle(gan: &StarGan, gen: &ParamSet, mcep: &Mat, source: &[f64], target: &[f64]) -> Result<(Mat, Mat)> {
    let there = convert(gan, gen, mcep, target)?;
    let back = convert(gan, gen, &there, source)?;
    Ok((there, back))
}

/// Loss weights and adversarial objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: Adversarial,
    pub lambda_rec: f64,
    pub lambda_gp: f64,
    pub lambda_cyc: f64,
    pub lambda_cls: f64,
}

impl LossWeights {
    pub fn stage1(cfg: &ToolkitConfig) -> Self {
        LossWeights {
            adversarial: cfg.model.adversarial,
            lambda_rec: cfg.stage1.lambda_rec,
            lambda_gp: cfg.stage1.lambda_gp,
            lambda_cyc: 0.0,
            lambda_cls: 0.0,
        }
    }

    pub fn stage2(cfg: &ToolkitConfig) -> Self {
        LossWeights {
            adversarial: cfg.model.adversarial,
            lambda_rec: 0.0,
            lambda_gp: cfg.stage2.lambda_gp,
            lambda_cyc: cfg.stage2.lambda_cyc,
            lambda_cls: cfg.stage2.lambda_cls,
        }
    }
}

/// A weighted total and its unweighted named parts.
pub struct Terms {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
}

impl Terms {
    pub fn values(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = self.parts.iter().map(|(n, v)| (n.to_string(), v.item())).collect();
        m.insert("total".into(), self.total.item());
        m
    }

    pub fn part(&self, name: &str) -> Option<&Var> {
        self.parts.iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<String> {
        self.values().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}

fn critic_loss(kind: Adversarial, real: &Var, fake: &Var) -> Var {
    match kind {
        Adversarial::WganGp => fake.mean().sub(&real.mean()),
        Adversarial::Lsgan => real.add_scalar(-1.0).square().mean().add(&fake.square().mean()),
    }
}

fn generator_adv(kind: Adversarial, fake: &Var) -> Var {
    match kind {
        Adversarial::WganGp => fake.mean().scale(-1.0),
        Adversarial::Lsgan => fake.add_scalar(-1.0).square().mean(),
    }
}

/// Mean of `(||grad_x critic(x_hat)|| - 1)^2` per sequence at
/// `x_hat = eps * real + (1 - eps) * fake`.
///
/// The penalty is differentiable with respect to the critic's parameters.
pub fn gradient_penalty(
    critic: &dyn Fn(&Seq) -> Result<Var>,
    real: &Seq,
    fake: &Seq,
    eps: &[f64],
) -> Result<Var> {
    assert_eq!(eps.len(), real.batch, "one interpolation weight per sequence");
    let tape = real.var.tape().clone();
    let r = real.var.value();
    let f = fake.var.value();
    let mut x = (*f).clone();
    for (row, mut out) in x.rows_mut().into_iter().enumerate() {
        let e = eps[row / real.len];
        for (j, v) in out.iter_mut().enumerate() {
            *v = e * r[[row, j]] + (1.0 - e) * f[[row, j]];
        }
    }
    let x_hat = tape.param(x);
    let score = critic(&Seq::new(x_hat.clone(), real.batch, real.len))?;
    let g = tape.grad(&score.sum(), &[&x_hat]).remove(0);
    let norms = g.square().sum_cols().group_sum(real.len).add_scalar(1e-12).sqrt();
    Ok(norms.add_scalar(-1.0).square().mean())
}

fn detached(s: &Seq) -> Seq {
    s.map(|v| v.detach())
}

/// Stage-1 critic loss: real chunks and their reconstructions, both scored under `E(x)`.
pub fn stage1_discriminator_terms(
    gan: &StarGan,
    g: &Bound,
    d: &Bound,
    x: &Seq,
    e: &Var,
    w: &LossWeights,
    eps: &[f64],
) -> Result<Terms> {
    let fake = detached(&gan.gen.forward(g, x, e)?);
    let critic = |s: &Seq| gan.disc.forward(d, s, e);
    let adv = critic_loss(w.adversarial, &critic(x)?, &critic(&fake)?);
    let gp = gradient_penalty(&critic, x, &fake, eps)?;
    Ok(Terms {
        total: adv.add(&gp.scale(w.lambda_gp)),
        parts: vec![("d_adv", adv), ("gp", gp)],
    })
}

/// Stage-1 generator loss: weighted L1 reconstruction plus the adversarial term.
pub fn stage1_generator_terms(gan: &StarGan, g: &Bound, d: &Bound, x: &Seq, e: &Var, w: &LossWeights) -> Result<Terms> {
    let fake = gan.gen.forward(g, x, e)?;
    let rec = l1_loss(&fake.var, &x.var);
    let adv = generator_adv(w.adversarial, &gan.disc.forward(d, &fake, e)?);
    Ok(Terms {
        total: rec.scale(w.lambda_rec).add(&adv),
        parts: vec![("rec", rec), ("g_adv", adv)],
    })
}

/// Stage-2 critic loss: real chunks under the source class mean, conversions
/// under the target class mean.
#[allow(clippy::too_many_arguments)]
pub fn stage2_discriminator_terms(
    gan: &StarGan,
    g: &Bound,
    d: &Bound,
    x: &Seq,
    e_src: &Var,
    e_tgt: &Var,
    w: &LossWeights,
    eps: &[f64],
) -> Result<Terms> {
    let fake = detached(&gan.gen.forward(g, x, e_tgt)?);
    let real_score = gan.disc.forward(d, x, e_src)?;
    let critic = |s: &Seq| gan.disc.forward(d, s, e_tgt);
    let adv = critic_loss(w.adversarial, &real_score, &critic(&fake)?);
    let gp = gradient_penalty(&critic, x, &fake, eps)?;
    Ok(Terms {
        total: adv.add(&gp.scale(w.lambda_gp)),
        parts: vec![("d_adv", adv), ("gp", gp)],
    })
}

/// Domain-classifier cross-entropy on real chunks.
pub fn domain_classifier_terms(gan: &StarGan, c: &Bound, x: &Seq, labels: &[usize]) -> Result<Terms> {
    let ce = cross_entropy(&gan.cls.forward(c, x)?.logits, labels);
    Ok(Terms {
        total: ce.clone(),
        parts: vec![("cls_real", ce)],
    })
}

/// Stage-2 generator loss: adversarial, classification of the conversion as
/// the target, and cycle reconstruction through the source class mean.
#[allow(clippy::too_many_arguments)]
pub fn stage2_generator_terms(
    gan: &StarGan,
    g: &Bound,
    d: &Bound,
    c: &Bound,
    x: &Seq,
    e_src: &Var,
    e_tgt: &Var,
    tgt_labels: &[usize],
    w: &LossWeights,
) -> Result<Terms> {
    let fake = gan.gen.forward(g, x, e_tgt)?;
    let adv = generator_adv(w.adversarial, &gan.disc.forward(d, &fake, e_tgt)?);
    let cls = cross_entropy(&gan.cls.forward(c, &fake)?.logits, tgt_labels);
    let back = gan.gen.forward(g, &fake, e_src)?;
    let cyc = l1_loss(&back.var, &x.var);
    Ok(Terms {
        total: adv.add(&cls.scale(w.lambda_cls)).add(&cyc.scale(w.lambda_cyc)),
        parts: vec![("g_adv", adv), ("cls_fake", cls), ("cyc", cyc)],
    })
}

/// One training batch. Stage-1 batches carry no target fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(batch * len, in_dim)` normalised mel-cepstra.
    pub x: Mat,
    pub len: usize,
    pub src_labels: Vec<usize>,
    /// Condition for the source: `E(x)` in stage 1, the source class mean in stage 2.
    pub e_src: Mat,
    pub target: Option<Target>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub labels: Vec<usize>,
    pub e_tgt: Mat,
}

/// Every named loss of a stage on one batch, without updating anything.
pub fn loss_bundle(gan: &StarGan, params: &StarGanParams, batch: &Batch, w: &LossWeights, eps: &[f64]) -> Result<BTreeMap<String, f64>> {
    let tape = Tape::new();
    let g = params.gen.bind(&tape, false);
    let d = params.disc.bind(&tape, false);
    let c = params.cls.bind(&tape, false);
    let x = Seq::new(tape.constant(batch.x.clone()), batch.src_labels.len(), batch.len);
    let e_src = tape.constant(batch.e_src.clone());
    let mut out = BTreeMap::new();
    let mut put = |prefix: &str, t: Terms| {
        for (k, v) in t.values() {
            out.insert(format!("{prefix}.{k}"), v);
        }
    };
    match &batch.target {
        None => {
            put("d", stage1_discriminator_terms(gan, &g, &d, &x, &e_src, w, eps)?);
            put("g", stage1_generator_terms(gan, &g, &d, &x, &e_src, w)?);
        }
        Some(t) => {
            let e_tgt = tape.constant(t.e_tgt.clone());
            put("d", stage2_discriminator_terms(gan, &g, &d, &x, &e_src, &e_tgt, w, eps)?);
            put("c", domain_classifier_terms(gan, &c, &x, &batch.src_labels)?);
            put("g", stage2_generator_terms(gan, &g, &d, &c, &x, &e_src, &e_tgt, &t.labels, w)?);
        }
    }
    Ok(out)
}

/// Metadata stored with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub config_hash: String,
}

pub fn save_checkpoint(path: &Path, gan: &StarGan, params: &StarGanParams, meta: &CheckpointMeta) -> Result<()> {
    let mut a = Archive::new(json!({
        "kind": "stargan",
        "nets": gan,
        "meta": meta,
    }));
    for ps in [&params.gen, &params.disc, &params.cls] {
        for (n, v) in ps.iter() {
            a.push(n, DType::F64, v.clone());
        }
    }
    a.write_atomic(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(StarGan, StarGanParams, CheckpointMeta)> {
    let a = Archive::read(path)?;
    let bad = |m: String| EvcError::Load {
        path: path.to_path_buf(),
        message: m,
    };
    if a.meta["kind"] != "stargan" {
        return Err(bad("not a StarGAN checkpoint".into()));
    }
    let gan: StarGan = serde_json::from_value(a.meta["nets"].clone()).map_err(|e| bad(e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_value(a.meta["meta"].clone()).map_err(|e| bad(e.to_string()))?;
    let (_, mut params) = StarGan::new(gan.arch.clone(), 0);
    let pick = |prefix: &'static str| a.arrays().filter(move |(n, _)| n.starts_with(prefix));
    params.gen.load_from(pick("gen."))?;
    params.disc.load_from(pick("disc."))?;
    params.cls.load_from(pick("dcls."))?;
    Ok((gan, params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch() -> StarGanArch {
        StarGanArch {
            generator: GeneratorArch {
                in_dim: 4,
                enc_channels: vec![5, 6],
                enc_kernels: vec![3, 4],
                enc_strides: vec![1, 2],
                latent_channels: 3,
                dec_channels: vec![5, 4],
                dec_kernel: 3,
                cond_dim: 2,
            },
            discriminator: DiscriminatorArch {
                in_dim: 4,
                channels: vec![5],
                kernels: vec![4],
                strides: vec![2],
                cond_dim: 2,
                conditioned: true,
            },
            classifier: ClassifierArch {
                in_dim: 4,
                channels: vec![4],
                kernels: vec![3],
                strides: vec![2],
                embedding_dim: 5,
                n_classes: 3,
            },
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shapes_and_latent_length() {
        let mut arch = tiny_arch();
        arch.generator.in_dim = 36;
        arch.generator.enc_strides = vec![2, 2];
        arch.generator.enc_kernels = vec![4, 4];
        let (gan, p) = StarGan::new(arch, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_mat(&mut rng, 128, 36);
        let z = encode_independent(&gan, &p.gen, &x).unwrap();
        assert_eq!(z.dim(), (32, 3));
        assert_eq!(z, encode_independent(&gan, &p.gen, &x).unwrap());
        let zero = encode_independent(&gan, &p.gen, &Mat::zeros((128, 36))).unwrap();
        assert!(zero.iter().all(|v| v.is_finite()));
        for t in [64, 128, 256, 37, 1] {
            let y = convert(&gan, &p.gen, &rand_mat(&mut rng, t, 36), &[0.3, -0.2]).unwrap();
            assert_eq!(y.dim(), (t, 36));
        }
        assert!(encode_independent(&gan, &p.gen, &rand_mat(&mut rng, 3, 36)).is_err());
        assert!(decode(&gan, &p.gen, &z, &[1.0, 2.0, 3.0]).is_err());
        let (a, b) = cycle(&gan, &p.gen, &x, &[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!((a.dim(), b.dim()), ((128, 36), (128, 36)));
        assert!(a.iter().chain(b.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn identity_generator_has_zero_reconstruction() {
        let tape = Tape::new();
        let x = tape.constant(Mat::from_elem((8, 4), 0.7));
        assert_eq!(l1_loss(&x, &x).item(), 0.0);
    }

    #[test]
    fn penalty_vanishes_for_unit_gradient_critic() {
        let tape = Tape::new();
        let (b, len, c) = (3, 4, 2);
        let real = Seq::new(tape.constant(Mat::from_elem((b * len, c), 0.5)), b, len);
        let k = 1.0 / ((len * c) as f64).sqrt();
        let critic = |s: &Seq| Ok(s.var.group_sum(s.len).sum_cols().scale(k));
        let gp = gradient_penalty(&critic, &real, &real.clone(), &[0.1, 0.5, 0.9]).unwrap();
        assert!(gp.item().abs() < 1e-10);
        let steep = |s: &Seq| Ok(s.var.group_sum(s.len).sum_cols().scale(3.0 * k));
        let gp2 = gradient_penalty(&steep, &real, &real, &[0.1, 0.5, 0.9]).unwrap();
        assert!((gp2.item() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn bundle_contains_stage_terms() {
        let (gan, p) = StarGan::new(tiny_arch(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = LossWeights {
            adversarial: Adversarial::WganGp,
            lambda_rec: 10.0,
            lambda_gp: 10.0,
            lambda_cyc: 10.0,
            lambda_cls: 1.0,
        };
        let mut batch = Batch {
            x: rand_mat(&mut rng, 16, 4),
            len: 8,
            src_labels: vec![0, 1],
            e_src: rand_mat(&mut rng, 2, 2),
            target: None,
        };
        let s1 = loss_bundle(&gan, &p, &batch, &w, &[0.3, 0.6]).unwrap();
        assert!(s1.contains_key("g.rec") && s1.contains_key("d.gp") && !s1.contains_key("g.cyc"));
        batch.target = Some(Target {
            labels: vec![2, 0],
            e_tgt: rand_mat(&mut rng, 2, 2),
        });
        let s2 = loss_bundle(&gan, &p, &batch, &w, &[0.3, 0.6]).unwrap();
        for k in ["g.cyc", "g.cls_fake", "c.cls_real", "d.gp", "g.g_adv", "d.d_adv"] {
            assert!(s2[k].is_finite(), "{k}");
        }
        assert!(s2["d.gp"] >= 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_bitwise_and_corruption() {
        let (gan, p) = StarGan::new(tiny_arch(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let meta = CheckpointMeta {
            stage: 1,
            step: 7,
            epoch: 1,
            seed: 3,
            weights: LossWeights {
                adversarial: Adversarial::WganGp,
                lambda_rec: 10.0,
                lambda_gp: 10.0,
                lambda_cyc: 0.0,
                lambda_cls: 0.0,
            },
            config_hash: "h".into(),
        };
        save_checkpoint(&path, &gan, &p, &meta).unwrap();
        let (g2, p2, m2) = load_checkpoint(&path).unwrap();
        assert_eq!((g2, m2), (gan, meta));
        assert_eq!(p2.gen.checksum(), p.gen.checksum());
        assert_eq!(p2.disc.checksum(), p.disc.checksum());
        assert_eq!(p2.cls.checksum(), p.cls.checksum());
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EvcError::Load { .. })));
    }
}
