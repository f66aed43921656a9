//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to stderr
//! (bypassing output capture) before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evc::audio::Waveform;
use evc::config::{Adversarial, ToolkitConfig};
use evc::convert::{convert_utterance, parse_pairs, read_index, IndexRow, ModelBundle, BUNDLE_CLASSIFIER, BUNDLE_CLASS_MEANS, BUNDLE_NORM, BUNDLE_STAGE2};
use evc::data::NormStats;
use evc::embedding::{ClassMeans, ClassifierArch, EmotionClassifier};
use evc::f0::{lgnt_convert, log_f0_stats, PairDelta, Spread};
use evc::features::{load_split, CorpusManifest, FeatureExtractor, Split};
use evc::mcd::{dtw_align, mcd, McdReport, McdSettings};
use evc::nn::{Bound, ParamSet, Seq};
use evc::ser::{f1_scores, ser_input_at, ser_prepare_input, AugmentationResult, SerInputSpec, WaveStandardizer};
use evc::stargan::{
    domain_classifier_terms, load_checkpoint, stage1_discriminator_terms, stage1_generator_terms,
    stage2_discriminator_terms, stage2_generator_terms, DiscriminatorArch, GeneratorArch, LossWeights, StarGan,
    StarGanArch, StarGanParams, Terms,
};
use evc::tape::{Mat, Tape};
use evc::train::TrainingLog;
use evc::vocoder::synthesis_len;
use evc::workflow::{self, ClassifierSummary, Stage1Summary, Stage2Summary};

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{verdict}] criterion {id:>2} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- fixtures

/// A bundle trained on six utterances.
struct Small {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: ToolkitConfig,
    manifest: CorpusManifest,
    cache: PathBuf,
    bundle: PathBuf,
    classifier: ClassifierSummary,
    stage1: Stage1Summary,
    stage1_secs: f64,
    stage2: Stage2Summary,
    stage2_secs: f64,
}

fn build_small() -> Small {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = workflow::toy_config();
    let manifest = workflow::gen_toy(&cfg, &root.join("corpus"), 2).unwrap();
    let cache = workflow::cache_dir(&cfg, &manifest, None);
    workflow::ingest(&cfg, &manifest, &cache).unwrap();
    let bundle = root.join("bundle");
    let classifier = workflow::train_classifier_step(&cfg, &manifest, &cache, &bundle).unwrap();
    let t = Instant::now();
    let stage1 = workflow::train_stage1_step(&cfg, &manifest, &cache, &bundle, Some(500)).unwrap();
    let stage1_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let stage2 = workflow::train_stage2_step(&cfg, &manifest, &cache, &bundle).unwrap();
    let stage2_secs = t.elapsed().as_secs_f64();
    Small {
        _dir: dir,
        root,
        cfg,
        manifest,
        cache,
        bundle,
        classifier,
        stage1,
        stage1_secs,
        stage2,
        stage2_secs,
    }
}

fn small() -> &'static Small {
    static CELL: OnceLock<Small> = OnceLock::new();
    CELL.get_or_init(build_small)
}

/// Training, corpus conversion, MCD and the augmentation experiment on a corpus with all splits.
struct Full {
    _dir: tempfile::TempDir,
    root: PathBuf,
    index: Vec<IndexRow>,
    mcd: McdReport,
    result: AugmentationResult,
    secs: f64,
}

fn build_full() -> Full {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = workflow::toy_config();
    assert_eq!(cfg.eval.trials, 2);
    let manifest = workflow::gen_toy(&cfg, &root.join("corpus"), 10).unwrap();
    let cache = workflow::cache_dir(&cfg, &manifest, None);
    workflow::ingest(&cfg, &manifest, &cache).unwrap();
    let bundle = root.join("bundle");
    workflow::train_classifier_step(&cfg, &manifest, &cache, &bundle).unwrap();
    workflow::train_stage1_step(&cfg, &manifest, &cache, &bundle, None).unwrap();
    workflow::train_stage2_step(&cfg, &manifest, &cache, &bundle).unwrap();
    let pairs = parse_pairs("angry:sad,angry:happy,sad:angry,sad:happy,happy:angry,happy:sad").unwrap();
    let conv = root.join("converted");
    let index = workflow::convert_corpus_step(&cfg, &manifest, Some(Split::Train), &pairs, &bundle, &conv).unwrap();
    let mcd = workflow::evaluate_mcd_step(&cfg, &manifest, &read_index(&conv.join("index.csv")).unwrap()).unwrap();
    let result = workflow::augment_experiment_step(&cfg, &manifest, &conv.join("index.csv"), None).unwrap();
    workflow::save_json(&root.join("mcd.json"), &mcd).unwrap();
    workflow::save_json(&root.join("results.json"), &result).unwrap();
    Full {
        _dir: dir,
        root,
        index,
        mcd,
        result,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn full() -> &'static Full {
    static CELL: OnceLock<Full> = OnceLock::new();
    CELL.get_or_init(build_full)
}

// ---------------------------------------------------------------- 1: LGNT

#[test]
fn c01_lgnt_exactness() {
    let t = Instant::now();
    let mut r = rng(101);
    let (mut worst_mu, mut worst_sd, mut identity, mut unvoiced) = (0.0f64, 0.0f64, true, true);
    for _ in 0..100 {
        let n = r.gen_range(20..300);
        let base: f64 = r.gen_range(80.0..300.0);
        let f0: Vec<f64> = (0..n)
            .map(|_| if r.gen_bool(0.3) { 0.0 } else { base * r.gen_range(0.7..1.4) })
            .collect();
        if f0.iter().filter(|&&f| f > 0.0).count() < 2 {
            continue;
        }
        let s = log_f0_stats(&f0, Spread::Std).unwrap();
        let delta = PairDelta {
            dmu: r.gen_range(-0.8..0.8),
            dsigma: r.gen_range(-0.9..1.0) * s.sigma,
        };
        let out = lgnt_convert(&f0, delta, Spread::Std);
        // Independent statistics of the output.
        let logs: Vec<f64> = out.f0.iter().filter(|&&f| f > 0.0).map(|f| f.ln()).collect();
        let mu = logs.iter().sum::<f64>() / logs.len() as f64;
        let sd = (logs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / logs.len() as f64).sqrt();
        worst_mu = worst_mu.max((mu - (s.mu + delta.dmu)).abs());
        worst_sd = worst_sd.max((sd - (s.sigma + delta.dsigma)).abs());
        unvoiced &= f0.iter().zip(&out.f0).all(|(a, b)| (*a == 0.0) == (*b == 0.0) && (*a != 0.0 || a.to_bits() == b.to_bits()));
        identity &= lgnt_convert(&f0, PairDelta::IDENTITY, Spread::Std).f0 == f0;
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        "log-Gaussian F0 transform",
        worst_mu < 1e-9 && worst_sd < 1e-9 && identity && unvoiced && secs < 5.0,
        format!("max |mean err| {worst_mu:.2e}, max |std err| {worst_sd:.2e}, identity {identity}, unvoiced kept {unvoiced}, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------- 2: MCD oracle

fn mcd_formula(a: &Mat, b: &Mat, lo: usize, hi: usize) -> f64 {
    let k = 10.0 / 10f64.ln();
    let mut total = 0.0;
    for t in 0..a.nrows() {
        let mut sq = 0.0;
        for d in lo..=hi {
            sq += (a[[t, d]] - b[[t, d]]).powi(2);
        }
        total += k * (2.0 * sq).sqrt();
    }
    total / a.nrows() as f64
}

#[test]
fn c02_mcd_oracle() {
    let s = McdSettings::default();
    let mut r = rng(202);
    let (mut worst, mut diagonal) = (0.0f64, true);
    for _ in 0..100 {
        // Frames far apart from each other and small perturbations keep the optimal path diagonal.
        let a = Mat::from_shape_fn((5, 36), |(t, _)| 50.0 * t as f64 + r.gen_range(-1.0..1.0));
        let b = Mat::from_shape_fn((5, 36), |(t, d)| a[[t, d]] + r.gen_range(-0.5..0.5));
        let path = dtw_align(&a.slice(ndarray::s![.., 1..=35]).to_owned(), &b.slice(ndarray::s![.., 1..=35]).to_owned()).unwrap();
        diagonal &= path.path == (0..5).map(|i| (i, i)).collect::<Vec<_>>();
        worst = worst.max((mcd(&a, &b, &s).unwrap() - mcd_formula(&a, &b, 1, 35)).abs());
    }
    let a = Mat::from_shape_fn((7, 36), |(t, d)| ((t * 3 + d) as f64).cos());
    let zero = mcd(&a, &a, &s).unwrap();
    let mut b = Mat::zeros((1, 36));
    b[[0, 4]] = 1.0;
    let single = mcd(&Mat::zeros((1, 36)), &b, &s).unwrap();
    report(
        2,
        "mel-cepstral distortion",
        diagonal && worst < 1e-9 && zero == 0.0 && (single - 6.1419).abs() < 1e-4 && (single - 6.141_851_463_713_754).abs() < 1e-6,
        format!("diagonal paths {diagonal}, max err {worst:.2e}, self {zero}, one unit {single:.6} dB"),
    );
}

// ---------------------------------------------------------------- 3: DTW brute force

fn all_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        cur.push((i, j));
        if i == n - 1 && j == m - 1 {
            out.push(cur.clone());
        } else {
            if i + 1 < n && j + 1 < m {
                rec(i + 1, j + 1, n, m, cur, out);
            }
            if i + 1 < n {
                rec(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                rec(i, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut out = Vec::new();
    rec(0, 0, n, m, &mut Vec::new(), &mut out);
    out
}

fn path_cost(a: &Mat, b: &Mat, p: &[(usize, usize)]) -> f64 {
    p.iter()
        .map(|&(i, j)| a.row(i).iter().zip(b.row(j).iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum()
}

#[test]
fn c03_dtw_brute_force() {
    let t = Instant::now();
    let mut r = rng(303);
    let (mut checked, mut worst, mut valid) = (0usize, 0.0f64, true);
    for n in 1..=6 {
        for m in 1..=6 {
            let paths = all_paths(n, m);
            for _ in 0..5 {
                let a = Mat::from_shape_fn((n, 3), |_| r.gen_range(-2.0..2.0));
                let b = Mat::from_shape_fn((m, 3), |_| r.gen_range(-2.0..2.0));
                let best = paths.iter().map(|p| path_cost(&a, &b, p)).fold(f64::INFINITY, f64::min);
                let got = dtw_align(&a, &b).unwrap();
                valid &= paths.contains(&got.path);
                worst = worst.max((got.cost - best).abs()).max((path_cost(&a, &b, &got.path) - best).abs());
                checked += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        3,
        "DTW against exhaustive search",
        valid && worst < 1e-12 && secs < 30.0,
        format!("{checked} cases up to 6x6, valid paths {valid}, max cost gap {worst:.2e}, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------- 4: gradients

fn mini_gan(adversarial: Adversarial) -> (StarGan, StarGanParams, LossWeights) {
    let arch = StarGanArch {
        generator: GeneratorArch {
            in_dim: 4,
            enc_channels: vec![3, 3],
            enc_kernels: vec![3, 2],
            enc_strides: vec![1, 2],
            latent_channels: 2,
            dec_channels: vec![3, 3],
            dec_kernel: 3,
            cond_dim: 2,
        },
        discriminator: DiscriminatorArch {
            in_dim: 4,
            channels: vec![3, 3],
            kernels: vec![3, 2],
            strides: vec![1, 2],
            cond_dim: 2,
            conditioned: true,
        },
        classifier: ClassifierArch {
            in_dim: 4,
            channels: vec![3],
            kernels: vec![3],
            strides: vec![2],
            embedding_dim: 2,
            n_classes: 3,
        },
    };
    let (gan, params) = StarGan::new(arch, 44);
    let w = LossWeights {
        adversarial,
        lambda_rec: 1.0,
        lambda_gp: 1.0,
        lambda_cyc: 1.0,
        lambda_cls: 1.0,
    };
    (gan, params, w)
}

#[derive(Clone, Copy, PartialEq)]
enum Net {
    Gen,
    Disc,
    Cls,
}

struct Probe {
    x: Mat,
    e_src: Mat,
    e_tgt: Mat,
    src: Vec<usize>,
    tgt: Vec<usize>,
    eps: Vec<f64>,
}

fn probe() -> Probe {
    let mut r = rng(404);
    Probe {
        x: Mat::from_shape_fn((2 * 8, 4), |_| r.gen_range(-1.0..1.0)),
        e_src: Mat::from_shape_fn((2, 2), |_| r.gen_range(-1.0..1.0)),
        e_tgt: Mat::from_shape_fn((2, 2), |_| r.gen_range(-1.0..1.0)),
        src: vec![0, 2],
        tgt: vec![1, 0],
        eps: vec![0.3, 0.8],
    }
}

type TermFn = fn(&StarGan, &Bound, &Bound, &Bound, &Seq, &evc::tape::Var, &evc::tape::Var, &Probe, &LossWeights) -> Terms;

fn eval_part(gan: &StarGan, params: &StarGanParams, w: &LossWeights, p: &Probe, f: TermFn, part: &str, net: Net) -> (f64, Vec<Mat>) {
    let tape = Tape::new();
    let g = params.gen.bind(&tape, net == Net::Gen);
    let d = params.disc.bind(&tape, net == Net::Disc);
    let c = params.cls.bind(&tape, net == Net::Cls);
    let x = Seq::new(tape.constant(p.x.clone()), 2, 8);
    let es = tape.constant(p.e_src.clone());
    let et = tape.constant(p.e_tgt.clone());
    let terms = f(gan, &g, &d, &c, &x, &es, &et, p, w);
    let v = terms.part(part).unwrap().clone();
    let grads = match net {
        Net::Gen => g.grads(&v),
        Net::Disc => d.grads(&v),
        Net::Cls => c.grads(&v),
    };
    (v.item(), grads)
}

fn set_of(params: &mut StarGanParams, net: Net) -> &mut ParamSet {
    match net {
        Net::Gen => &mut params.gen,
        Net::Disc => &mut params.disc,
        Net::Cls => &mut params.cls,
    }
}

/// Relative error `|analytic - numeric| / max(|analytic|, |numeric|)` over all parameters of `net`.
fn grad_check(adversarial: Adversarial, f: TermFn, part: &str, net: Net) -> f64 {
    let (gan, params, w) = mini_gan(adversarial);
    let p = probe();
    let (_, analytic) = eval_part(&gan, &params, &w, &p, f, part, net);
    let h = 1e-5;
    let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
    for (k, a) in analytic.iter().enumerate() {
        for idx in 0..a.len() {
            let (rr, cc) = (idx / a.ncols(), idx % a.ncols());
            let mut plus = params.clone();
            set_of(&mut plus, net).values_mut()[k][[rr, cc]] += h;
            let mut minus = params.clone();
            set_of(&mut minus, net).values_mut()[k][[rr, cc]] -= h;
            let num = (eval_part(&gan, &plus, &w, &p, f, part, net).0 - eval_part(&gan, &minus, &w, &p, f, part, net).0) / (2.0 * h);
            let ana = a[[rr, cc]];
            diff += (ana - num).powi(2);
            an += ana * ana;
            nu += num * num;
        }
    }
    assert!(an > 0.0, "{part}: gradient vanished");
    diff.sqrt() / an.sqrt().max(nu.sqrt())
}

fn s1_gen(gan: &StarGan, g: &Bound, d: &Bound, _: &Bound, x: &Seq, es: &evc::tape::Var, _: &evc::tape::Var, _: &Probe, w: &LossWeights) -> Terms {
    stage1_generator_terms(gan, g, d, x, es, w).unwrap()
}

fn s1_disc(gan: &StarGan, g: &Bound, d: &Bound, _: &Bound, x: &Seq, es: &evc::tape::Var, _: &evc::tape::Var, p: &Probe, w: &LossWeights) -> Terms {
    stage1_discriminator_terms(gan, g, d, x, es, w, &p.eps).unwrap()
}

fn s2_disc(gan: &StarGan, g: &Bound, d: &Bound, _: &Bound, x: &Seq, es: &evc::tape::Var, et: &evc::tape::Var, p: &Probe, w: &LossWeights) -> Terms {
    stage2_discriminator_terms(gan, g, d, x, es, et, w, &p.eps).unwrap()
}

fn s2_cls(gan: &StarGan, _: &Bound, _: &Bound, c: &Bound, x: &Seq, _: &evc::tape::Var, _: &evc::tape::Var, p: &Probe, _: &LossWeights) -> Terms {
    domain_classifier_terms(gan, c, x, &p.src).unwrap()
}

fn s2_gen(gan: &StarGan, g: &Bound, d: &Bound, c: &Bound, x: &Seq, es: &evc::tape::Var, et: &evc::tape::Var, p: &Probe, w: &LossWeights) -> Terms {
    stage2_generator_terms(gan, g, d, c, x, es, et, &p.tgt, w).unwrap()
}

#[test]
fn c04_gradient_checks() {
    let t = Instant::now();
    let cases: Vec<(&str, Adversarial, TermFn, &str, Net)> = vec![
        ("rec", Adversarial::WganGp, s1_gen, "rec", Net::Gen),
        ("adv G (wgan)", Adversarial::WganGp, s1_gen, "g_adv", Net::Gen),
        ("adv G (lsgan)", Adversarial::Lsgan, s2_gen, "g_adv", Net::Gen),
        ("adv D (wgan)", Adversarial::WganGp, s1_disc, "d_adv", Net::Disc),
        ("adv D (lsgan)", Adversarial::Lsgan, s2_disc, "d_adv", Net::Disc),
        ("gp stage 1", Adversarial::WganGp, s1_disc, "gp", Net::Disc),
        ("gp stage 2", Adversarial::WganGp, s2_disc, "gp", Net::Disc),
        ("domain CE", Adversarial::WganGp, s2_cls, "cls_real", Net::Cls),
        ("domain CE on G", Adversarial::WganGp, s2_gen, "cls_fake", Net::Gen),
        ("cycle", Adversarial::WganGp, s2_gen, "cyc", Net::Gen),
    ];
    let mut errs = BTreeMap::new();
    for (name, adv, f, part, net) in cases {
        errs.insert(name, grad_check(adv, f, part, net));
    }
    let worst = errs.values().cloned().fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    let detail: Vec<String> = errs.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    report(
        4,
        "gradient checks",
        worst < 1e-6 && secs < 120.0,
        format!("{}; {secs:.1}s", detail.join(", ")),
    );
}

// ---------------------------------------------------------------- 5-8: trained bundle

#[test]
fn c05_stage1_overfit() {
    let s = small();
    let ratio = s.stage1.final_reconstruction_l1 / s.stage1.initial_reconstruction_l1;
    let n = load_split(&s.manifest, &s.cache, Split::Train).unwrap().len();
    let unchanged = s.stage1.classifier_checksum_before == s.stage1.classifier_checksum_after;
    report(
        5,
        "stage-1 overfit",
        n == 6 && s.stage1.steps == 500 && ratio < 0.10 && unchanged && s.stage1_secs < 600.0,
        format!(
            "{n} utterances, {} steps, L1 {:.4} -> {:.4} ({:.1}% of initial), classifier unchanged {unchanged}, {:.1}s",
            s.stage1.steps,
            s.stage1.initial_reconstruction_l1,
            s.stage1.final_reconstruction_l1,
            100.0 * ratio,
            s.stage1_secs
        ),
    );
}

#[test]
fn c06_stage2_schedule_and_quality() {
    let s = small();
    let text = std::fs::read_to_string(s.bundle.join("logs/stage2_summary.json")).unwrap();
    let log: TrainingLog = serde_json::from_str(&text).unwrap();
    let per_epoch = log
        .epochs
        .iter()
        .all(|e| e.updates.g > 0 && e.updates.d == 5 * e.updates.g && e.updates.c == 5 * e.updates.g);
    let c = s.stage2.counters;
    let totals = c.d == 5 * c.g && c.c == 5 * c.g;
    let factor = s.stage2.untrained_cycle_l1 / s.stage2.final_cycle_l1;
    report(
        6,
        "stage-2 schedule and quality",
        per_epoch && totals && factor >= 2.0 && s.stage2.domain_accuracy > 0.90 && s.stage2_secs < 1200.0,
        format!(
            "{} epochs, updates D/C/G {}/{}/{}, cycle L1 {:.4} vs untrained {:.4} (x{factor:.2}), domain accuracy {:.3}, {:.1}s",
            log.epochs.len(),
            c.d,
            c.c,
            c.g,
            s.stage2.final_cycle_l1,
            s.stage2.untrained_cycle_l1,
            s.stage2.domain_accuracy,
            s.stage2_secs
        ),
    );
}

struct Converted {
    source: evc::features::UtteranceFeatures,
    out: Waveform,
    conv: evc::features::UtteranceFeatures,
    delta: PairDelta,
}

fn convert_one(s: &Small) -> Converted {
    let bundle = ModelBundle::load(&s.bundle, s.cfg.model.energy).unwrap();
    let extractor = FeatureExtractor::new(&s.cfg.data).unwrap();
    let entry = s.manifest.entries.iter().find(|e| e.emotion == "sad").unwrap();
    let wave = Waveform::read_wav(&s.manifest.resolve(entry)).unwrap();
    let source = extractor.extract(&wave, "src", "spk", "sad").unwrap();
    let (out, conv) = convert_utterance(&bundle, &extractor, &wave, "sad", "angry").unwrap();
    Converted {
        source,
        out,
        conv,
        delta: bundle.f0.deltas.get("sad", "angry").unwrap(),
    }
}

#[test]
fn c07_end_to_end_conversion() {
    let s = small();
    let t = Instant::now();
    let c = convert_one(s);
    let secs = t.elapsed().as_secs_f64();
    let frames = c.conv.frames() == c.source.frames()
        && c.conv.sp.nrows() == c.source.frames()
        && c.out.len() == synthesis_len(c.source.frames(), s.cfg.data.sample_rate, s.cfg.data.frame_period_ms);
    let ap_bits = c.conv.ap.shape() == c.source.ap.shape()
        && c.conv.ap.iter().zip(c.source.ap.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    let before = log_f0_stats(&c.source.f0, Spread::Std).unwrap();
    let after = log_f0_stats(&c.conv.f0, Spread::Std).unwrap();
    let shift_err = (after.mu - before.mu - c.delta.dmu).abs();
    let voicing = c.source.f0.iter().zip(&c.conv.f0).all(|(a, b)| (*a > 0.0) == (*b > 0.0));
    let clean = c.out.samples.iter().all(|v| v.is_finite() && v.abs() <= 1.0);
    report(
        7,
        "end-to-end conversion",
        frames && ap_bits && shift_err < 1e-9 && voicing && clean && secs < 60.0,
        format!(
            "{} frames kept {frames}, aperiodicity bitwise {ap_bits}, mean ln-F0 shift error {shift_err:.2e} (dmu {:.4}), voicing kept {voicing}, {secs:.2}s",
            c.source.frames(),
            c.delta.dmu
        ),
    );
}

#[test]
fn c08_class_means_and_frozen_encoder() {
    let s = small();
    let (clf, _) = EmotionClassifier::load(&s.bundle.join(BUNDLE_CLASSIFIER)).unwrap();
    let (means, _) = ClassMeans::load(&s.bundle.join(BUNDLE_CLASS_MEANS)).unwrap();
    let norm = NormStats::load(&s.bundle.join(BUNDLE_NORM)).unwrap();
    let feats = load_split(&s.manifest, &s.cache, Split::Train).unwrap();
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for f in feats.iter().rev() {
        let e = clf.embed(&norm.normalize(f.mcep().unwrap()).unwrap()).unwrap();
        let entry = sums.entry(f.emotion.clone()).or_insert((vec![0.0; e.len()], 0));
        for (a, b) in entry.0.iter_mut().zip(&e) {
            *a += b;
        }
        entry.1 += 1;
    }
    let mut worst = 0.0f64;
    for (label, (sum, n)) in &sums {
        for (m, s) in means.get(label).unwrap().iter().zip(sum) {
            worst = worst.max((m - s / *n as f64).abs());
        }
    }
    let (_, _, meta) = load_checkpoint(&s.bundle.join(BUNDLE_STAGE2)).unwrap();
    let sums_ok = [
        &s.stage1.classifier_checksum_before,
        &s.stage1.classifier_checksum_after,
        &s.stage2.classifier_checksum_before,
        &s.stage2.classifier_checksum_after,
    ]
    .iter()
    .all(|c| **c == s.classifier.checksum)
        && clf.params.checksum() == s.classifier.checksum;
    report(
        8,
        "class means and frozen encoder",
        worst < 1e-12 && sums.len() == 3 && sums_ok && meta.config_hash == s.classifier.config_hash,
        format!("max class-mean error {worst:.2e} over {} classes, classifier checksum invariant {sums_ok}", sums.len()),
    );
}

// ---------------------------------------------------------------- 9-10: SER pieces

fn f1_oracle(pred: &[usize], truth: &[usize], k: usize) -> (f64, f64) {
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let micro = correct as f64 / pred.len() as f64;
    let mut macro_ = 0.0;
    for c in 0..k {
        let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { confusion[c][c] as f64 / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { confusion[c][c] as f64 / actual as f64 };
        if precision + recall > 0.0 {
            macro_ += 2.0 * precision * recall / (precision + recall);
        }
    }
    (100.0 * micro, 100.0 * macro_ / k as f64)
}

#[test]
fn c09_f1_oracle() {
    let mut r = rng(909);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(1..60);
        let k = r.gen_range(2..6);
        let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let got = f1_scores(&pred, &truth, k).unwrap();
        let (mi, ma) = f1_oracle(&pred, &truth, k);
        worst = worst.max((got.micro - mi).abs()).max((got.macro_ - ma).abs());
    }
    let truth: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let constant = f1_scores(&vec![0; 30], &truth, 3).unwrap();
    let const_ok = (constant.micro - 100.0 / 3.0).abs() < 0.01 && (constant.macro_ - 100.0 / 6.0).abs() < 0.01;
    report(
        9,
        "F1 scores",
        worst < 1e-9 && const_ok,
        format!("max deviation {worst:.2e} over 1000 sets, constant predictor {:.2}/{:.2}", constant.micro, constant.macro_),
    );
}

#[test]
fn c10_ser_input_layout() {
    let spec = SerInputSpec::from_config(&ToolkitConfig::default().eval);
    let shape = (spec.frames, spec.frame_len) == (16, 640) && spec.frame_len - spec.hop == 480;
    let wave: Vec<f64> = (0..5000).map(|i| (i as f64 * 0.37).sin()).collect();
    let id = WaveStandardizer::identity();
    let x = ser_input_at(&wave, &spec, &id, 123).unwrap();
    let windows = x.shape() == [16, 640]
        && (0..16).all(|i| (0..640).all(|j| x[[i, j]] == wave[123 + i * 160 + j]))
        && (1..16).all(|i| (0..480).all(|j| x[[i, j]] == x[[i - 1, j + 160]]));
    let exact: Vec<f64> = wave[..3040].to_vec();
    let forced = spec.span() == 3040
        && spec.max_start(3040) == 0
        && (0..20).all(|seed| ser_prepare_input(&exact, &spec, &id, seed).unwrap() == ser_input_at(&exact, &spec, &id, 0).unwrap())
        && ser_input_at(&exact, &spec, &id, 1).is_err();
    report(
        10,
        "SER input layout",
        shape && windows && forced,
        format!("16x640 with 480-sample overlap {shape}, windows match raw samples {windows}, 3040 samples force start 0 {forced}"),
    );
}

// ---------------------------------------------------------------- 11: pipeline

fn f1_in_range(v: f64) -> bool {
    (0.0..=100.0).contains(&v)
}

#[test]
fn c11_full_pipeline() {
    let f = full();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.root.join("results.json")).unwrap()).unwrap();
    let reparsed: AugmentationResult = serde_json::from_value(json.clone()).unwrap();
    let mcd_json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.root.join("mcd.json")).unwrap()).unwrap();
    let checks = [
        f.result.validate().is_ok(),
        reparsed.validate().is_ok(),
        json["variants"].as_array().is_some_and(|v| v.len() == 2),
        ["pairs", "overall", "utterances", "method", "config_hash"].iter().all(|k| mcd_json.get(k).is_some()),
        f.mcd.pairs.len() == 6,
        f.mcd.overall.is_finite(),
    ];
    let schema = checks.iter().all(|c| *c);
    let real = f.result.variant("real").unwrap();
    let improved = f.result.variant("real+improved").unwrap();
    let ranges = f.result.variants.iter().all(|v| {
        f1_in_range(v.micro_f1) && f1_in_range(v.macro_f1) && v.per_trial.iter().all(|t| f1_in_range(t.micro) && f1_in_range(t.macro_))
    });
    let trials = f.result.variants.iter().all(|v| v.trials == 2 && v.per_trial.len() == 2);
    let gain = improved.micro_f1 >= real.micro_f1 - 5.0;
    report(
        11,
        "full pipeline",
        schema && ranges && trials && gain && !f.index.is_empty() && f.secs < 2700.0,
        format!(
            "{} conversions, MCD {:.2} dB, micro-F1 real {:.2} vs real+improved {:.2}, macro-F1 {:.2} vs {:.2}, schema {schema}, {:.1}s",
            f.index.len(),
            f.mcd.overall,
            real.micro_f1,
            improved.micro_f1,
            real.macro_f1,
            improved.macro_f1,
            f.secs
        ),
    );
}

// ---------------------------------------------------------------- 12: determinism

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn summary_log(p: &Path) -> TrainingLog {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn relative(report: &McdReport, root: &Path) -> McdReport {
    let mut r = report.clone();
    let strip = |s: &str| s.replace(&root.display().to_string(), "");
    for u in &mut r.utterances {
        u.reference = strip(&u.reference);
        u.converted = strip(&u.converted);
    }
    r
}

#[test]
fn c12_determinism() {
    let (a, b) = (small(), &build_small());
    let mut same = BTreeMap::new();
    for stage in ["stage1", "stage2"] {
        let logs = |s: &Small| s.bundle.join("logs");
        same.insert(
            format!("{stage} log"),
            read(&logs(a).join(format!("{stage}.jsonl"))) == read(&logs(b).join(format!("{stage}.jsonl")))
                && summary_log(&logs(a).join(format!("{stage}_summary.json"))).deterministic_eq(&summary_log(&logs(b).join(format!("{stage}_summary.json")))),
        );
    }
    same.insert("stage reports".into(), a.stage1 == b.stage1 && a.stage2 == b.stage2);
    same.insert("stage-2 checkpoint".into(), read(&a.bundle.join(BUNDLE_STAGE2)) == read(&b.bundle.join(BUNDLE_STAGE2)));
    let (ca, cb) = (convert_one(a), convert_one(b));
    same.insert(
        "conversion".into(),
        ca.out.samples.iter().zip(&cb.out.samples).all(|(x, y)| x.to_bits() == y.to_bits()) && ca.out.len() == cb.out.len(),
    );
    assert!(a.root != b.root);

    let (fa, fb) = (full(), &build_full());
    same.insert("MCD report".into(), relative(&fa.mcd, &fa.root) == relative(&fb.mcd, &fb.root));
    same.insert("augmentation report".into(), fa.result == fb.result);
    let all = same.values().all(|v| *v);
    let detail: Vec<String> = same.iter().map(|(k, v)| format!("{k} {}", if *v { "identical" } else { "DIFFERS" })).collect();
    report(12, "determinism", all, detail.join(", "));
}
