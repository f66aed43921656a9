//! Parameter storage, layers and the Adam optimiser built on [`crate::tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EvcError, Result};
use crate::tape::{ConvGeom, Mat, Tape, Var};

/// Ordered, named parameter matrices of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces values from `(name, matrix)` pairs; names and shapes must match exactly.
    pub fn load_from<'a>(&mut self, arrays: impl IntoIterator<Item = (&'a str, &'a Mat)>) -> Result<()> {
        let mut seen = 0;
        for (name, value) in arrays {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| EvcError::data(format!("unexpected parameter array `{name}`")))?;
            if self.values[idx].dim() != value.dim() {
                return Err(EvcError::data(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.dim(),
                    self.values[idx].dim()
                )));
            }
            self.values[idx] = value.clone();
            seen += 1;
        }
        if seen != self.len() {
            return Err(EvcError::data(format!(
                "checkpoint provides {seen} of {} parameter arrays",
                self.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of one network placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, idx: usize) -> &Var {
        &self.vars[idx]
    }

    pub fn vars(&self) -> Vec<&Var> {
        self.vars.iter().collect()
    }

    /// Gradients of `loss` with respect to every bound parameter, as plain matrices.
    pub fn grads(&self, loss: &Var) -> Vec<Mat> {
        let tape = loss.tape();
        tape.grad(loss, &self.vars())
            .into_iter()
            .map(|g| (*g.value()).clone())
            .collect()
    }
}

/// A batch of sequences stored as `(batch * len, channels)`.
#[derive(Clone, Debug)]
pub struct Seq {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
}

impl Seq {
    pub fn new(var: Var, batch: usize, len: usize) -> Self {
        assert_eq!(var.shape().0, batch * len, "sequence rows != batch * len");
        Seq { var, batch, len }
    }

    pub fn channels(&self) -> usize {
        self.var.shape().1
    }

    pub fn map(&self, f: impl FnOnce(&Var) -> Var) -> Seq {
        Seq::new(f(&self.var), self.batch, self.len)
    }

    /// Per-sequence mean over time: `(batch, channels)`.
    pub fn time_mean(&self) -> Var {
        self.var.group_mean(self.len)
    }

    /// Concatenates a per-sequence vector `(batch, d)` onto every frame.
    pub fn concat_condition(&self, cond: &Var) -> Seq {
        assert_eq!(cond.shape().0, self.batch, "condition batch mismatch");
        let tiled = cond.group_repeat(self.len);
        self.map(|v| v.concat_cols(&tiled))
    }

    /// Nearest-neighbour upsampling along time.
    pub fn upsample(&self, factor: usize) -> Seq {
        Seq::new(self.var.group_repeat(factor), self.batch, self.len * factor)
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = (3.0 / fan_in as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

/// 1-D convolution over time with "same"-style padding (`kernel - stride` in total).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    weight: usize,
    bias: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel >= stride && stride >= 1, "{name}: kernel must be >= stride");
        let fan_in = kernel * c_in;
        let weight = ps.push(
            format!("{name}.weight"),
            uniform_init(rng, fan_in, c_out, fan_in),
        );
        let bias = ps.push(format!("{name}.bias"), Mat::zeros((1, c_out)));
        Conv1d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    fn geom(&self, batch: usize, len: usize) -> Result<ConvGeom> {
        let pad = self.kernel - self.stride;
        let left = pad / 2;
        ConvGeom::new(batch, len, self.c_in, self.kernel, self.stride, left, pad - left)
            .ok_or_else(|| EvcError::invalid(format!("sequence of {len} frames too short for convolution")))
    }

    pub fn forward(&self, p: &Bound, x: &Seq) -> Result<Seq> {
        if x.channels() != self.c_in {
            return Err(EvcError::invalid(format!(
                "convolution expects {} channels, got {}",
                self.c_in,
                x.channels()
            )));
        }
        let geom = self.geom(x.batch, x.len)?;
        let y = x
            .var
            .im2col(geom)
            .matmul(p.get(self.weight))
            .add_row(p.get(self.bias));
        Ok(Seq::new(y, x.batch, geom.t_out))
    }
}

/// Convolution followed by a gated linear unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GluConv {
    conv: Conv1d,
}

impl GluConv {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        GluConv {
            conv: Conv1d::new(ps, rng, name, c_in, 2 * c_out, kernel, stride),
        }
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out / 2
    }

    pub fn stride(&self) -> usize {
        self.conv.stride
    }

    pub fn forward(&self, p: &Bound, x: &Seq) -> Result<Seq> {
        let h = self.conv.forward(p, x)?;
        let c = self.c_out();
        Ok(h.map(|v| v.slice_cols(0, c).mul(&v.slice_cols(c, c).sigmoid())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    weight: usize,
    bias: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = ps.push(format!("{name}.weight"), uniform_init(rng, d_in, d_out, d_in));
        let bias = ps.push(format!("{name}.bias"), Mat::zeros((1, d_out)));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// A linear map without bias.
    pub fn new_no_bias(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = ps.push(format!("{name}.weight"), uniform_init(rng, d_in, d_out, d_in));
        Linear {
            weight,
            bias: usize::MAX,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let y = x.matmul(p.get(self.weight));
        if self.bias == usize::MAX {
            y
        } else {
            y.add_row(p.get(self.bias))
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Row-wise log-softmax; the row maximum is subtracted as a constant.
pub fn log_softmax(logits: &Var) -> Var {
    let v = logits.value();
    let max = Mat::from_shape_fn((v.nrows(), v.ncols()), |(i, _)| {
        v.row(i).fold(f64::NEG_INFINITY, |m, &x| m.max(x))
    });
    let shifted = logits.sub(&logits.tape().constant(max));
    let lse = shifted.exp().sum_cols().ln();
    shifted.sub(&lse.broadcast_cols(v.ncols()))
}

/// Mean cross-entropy of `(batch, classes)` logits against class indices.
pub fn cross_entropy(logits: &Var, targets: &[usize]) -> Var {
    let (b, k) = logits.shape();
    assert_eq!(b, targets.len(), "cross_entropy: target count mismatch");
    let onehot = Mat::from_shape_fn((b, k), |(i, j)| if targets[i] == j { 1.0 } else { 0.0 });
    log_softmax(logits).mul_const(onehot).sum().scale(-1.0 / b as f64)
}

pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean absolute difference.
pub fn l1_loss(a: &Var, b: &Var) -> Var {
    a.sub(b).abs().mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_halves_time_with_stride_two() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv1d::new(&mut ps, &mut rng, "c", 3, 5, 4, 2);
        let tape = Tape::new();
        let p = ps.bind(&tape, true);
        let x = Seq::new(tape.constant(Mat::ones((2 * 16, 3))), 2, 16);
        let y = conv.forward(&p, &x).unwrap();
        assert_eq!((y.batch, y.len, y.channels()), (2, 8, 5));
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("x", Mat::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &ps,
        );
        for _ in 0..500 {
            let tape = Tape::new();
            let p = ps.bind(&tape, true);
            let loss = p.get(0).square().sum();
            let g = p.grads(&loss);
            opt.update(&mut ps, &g);
        }
        assert!(ps.values()[0].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut ps = ParamSet::new();
        ps.push("a", Mat::zeros((2, 2)));
        let before = ps.checksum();
        ps.values_mut()[0][[0, 0]] = -0.0;
        assert_ne!(before, ps.checksum());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let tape = Tape::new();
        let logits = tape.param(Mat::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 400.0, 0.0, -1.0]).unwrap());
        let ce = cross_entropy(&logits, &[2, 0]).item();
        let row0 = -(3.0f64 - (1f64.exp() + 2f64.exp() + 3f64.exp()).ln());
        let row1 = (1.0 + (-400f64).exp() + (-401f64).exp()).ln();
        assert!((ce - (row0 + row1) / 2.0).abs() < 1e-12);
        let p = softmax_rows(&logits.value());
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&logits.value().mapv(|x| x + 17.0));
        assert_eq!(argmax_rows(&p), argmax_rows(&shifted));
    }
}
