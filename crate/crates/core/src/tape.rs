//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix. Sequence tensors of shape `(batch, time, channels)`
//! are stored as `(batch * time, channels)` with rows ordered batch-major, which
//! turns 1-D convolutions into `im2col` followed by a matrix product.
//!
//! Vector-Jacobian products are themselves recorded on the tape, so a gradient
//! returned by [`Tape::grad`] is an ordinary [`Var`] that can be differentiated
//! again. The critic's gradient penalty relies on this.

use std::cell::RefCell;
use std::fmt;
use std::ops;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Geometry of a 1-D convolution over the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub t_in: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub t_out: usize,
}

impl ConvGeom {
    /// Returns `None` when the padded input is shorter than the kernel.
    pub fn new(
        batch: usize,
        t_in: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Option<Self> {
        let padded = t_in + pad_left + pad_right;
        if kernel == 0 || stride == 0 || padded < kernel {
            return None;
        }
        Some(ConvGeom {
            batch,
            t_in,
            c_in,
            kernel,
            stride,
            pad_left,
            t_out: (padded - kernel) / stride + 1,
        })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulConst(usize, Rc<Mat>),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    Abs(usize),
    LeakyRelu(usize, f64),
    SumAll(usize),
    BroadcastScalar(usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
    SliceCols(usize, usize, usize),
    PadCols(usize, usize),
    ConcatCols(usize, usize),
    Im2Col(usize, ConvGeom),
    Col2Im(usize, ConvGeom),
    GroupSum(usize, usize),
    GroupRepeat(usize, usize),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    needs_grad: bool,
}

/// An append-only computation record. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.value();
        write!(f, "Var#{}{:?}", self.id, v.dim())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Mat> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn var(&self, id: usize) -> Var {
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned gradients live on this tape and are differentiable.
    /// Inputs that `output` does not depend on receive a zero constant.
    pub fn grad(&self, output: &Var, wrt: &[&Var]) -> Vec<Var> {
        assert!(
            Rc::ptr_eq(&self.nodes, &output.tape.nodes),
            "output belongs to a different tape"
        );
        assert_eq!(output.value().dim(), (1, 1), "grad requires a 1x1 output");
        let n = output.id + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[output.id] = Some(self.scalar(1.0));
        for id in (0..n).rev() {
            let Some(g) = grads[id].clone() else {
                continue;
            };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[id].needs_grad {
                    continue;
                }
                nodes[id].op.clone()
            };
            for (pid, contrib) in self.vjp(id, &op, &g) {
                grads[pid] = Some(match grads[pid].take() {
                    Some(acc) => &acc + &contrib,
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).and_then(|g| g.clone()) {
                Some(g) => g,
                None => {
                    let (r, c) = w.value().dim();
                    self.constant(Mat::zeros((r, c)))
                }
            })
            .collect()
    }

    fn vjp(&self, id: usize, op: &Op, g: &Var) -> Vec<(usize, Var)> {
        let mut out = Vec::with_capacity(2);
        let mut emit = |pid: usize, f: &dyn Fn() -> Var| {
            if self.needs(pid) {
                out.push((pid, f()));
            }
        };
        let this = || self.var(id);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(a, &|| g.clone());
                emit(b, &|| g.clone());
            }
            Op::Sub(a, b) => {
                emit(a, &|| g.clone());
                emit(b, &|| g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                emit(a, &|| g * &self.var(b));
                emit(b, &|| g * &self.var(a));
            }
            Op::AddRow(a, b) => {
                emit(a, &|| g.clone());
                emit(b, &|| g.sum_rows());
            }
            Op::Scale(a, c) => emit(a, &|| g.scale(c)),
            Op::AddScalar(a) => emit(a, &|| g.clone()),
            Op::MulConst(a, ref m) => emit(a, &|| g.mul_const_rc(m.clone())),
            Op::MatMul(a, b) => {
                emit(a, &|| g.matmul(&self.var(b).t()));
                emit(b, &|| self.var(a).t().matmul(g));
            }
            Op::Transpose(a) => emit(a, &|| g.t()),
            Op::Sigmoid(a) => emit(a, &|| {
                let y = this();
                g * &(&y - &(&y * &y))
            }),
            Op::Tanh(a) => emit(a, &|| {
                let y = this();
                g - &(g * &(&y * &y))
            }),
            Op::Exp(a) => emit(a, &|| g * &this()),
            Op::Log(a) => emit(a, &|| g * &self.var(a).recip()),
            Op::Sqrt(a) => emit(a, &|| (g * &this().recip()).scale(0.5)),
            Op::Recip(a) => emit(a, &|| {
                let y = this();
                (g * &(&y * &y)).scale(-1.0)
            }),
            Op::Abs(a) => emit(a, &|| {
                let sign = self.value_of(a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                g.mul_const(sign)
            }),
            Op::LeakyRelu(a, slope) => emit(a, &|| {
                let mask = self
                    .value_of(a)
                    .mapv(|x| if x > 0.0 { 1.0 } else { slope });
                g.mul_const(mask)
            }),
            Op::SumAll(a) => emit(a, &|| {
                let (r, c) = self.value_of(a).dim();
                g.broadcast_scalar(r, c)
            }),
            Op::BroadcastScalar(a) => emit(a, &|| g.sum()),
            Op::SumRows(a) => emit(a, &|| g.broadcast_rows(self.value_of(a).nrows())),
            Op::BroadcastRows(a) => emit(a, &|| g.sum_rows()),
            Op::SumCols(a) => emit(a, &|| g.broadcast_cols(self.value_of(a).ncols())),
            Op::BroadcastCols(a) => emit(a, &|| g.sum_cols()),
            Op::SliceCols(a, start, total) => emit(a, &|| g.pad_cols(start, total)),
            Op::PadCols(a, start) => emit(a, &|| g.slice_cols(start, self.value_of(a).ncols())),
            Op::ConcatCols(a, b) => {
                let na = self.value_of(a).ncols();
                let nb = self.value_of(b).ncols();
                emit(a, &|| g.slice_cols(0, na));
                emit(b, &|| g.slice_cols(na, nb));
            }
            Op::Im2Col(a, geom) => emit(a, &|| g.col2im(geom)),
            Op::Col2Im(a, geom) => emit(a, &|| g.im2col(geom)),
            Op::GroupSum(a, len) => emit(a, &|| g.group_repeat(len)),
            Op::GroupRepeat(a, len) => emit(a, &|| g.group_sum(len)),
        }
        out
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Value of a 1x1 variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Mat, op: Op) -> Var {
        let needs = self.requires_grad();
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: &Var, value: Mat, op: Op) -> Var {
        assert!(
            Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes),
            "operands belong to different tapes"
        );
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, needs)
    }

    fn same_shape(&self, other: &Var, what: &str) -> (Rc<Mat>, Rc<Mat>) {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch");
        (a, b)
    }

    pub fn add(&self, other: &Var) -> Var {
        let (a, b) = self.same_shape(other, "add");
        self.binary(other, &*a + &*b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (a, b) = self.same_shape(other, "sub");
        self.binary(other, &*a - &*b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (a, b) = self.same_shape(other, "mul");
        self.binary(other, &*a * &*b, Op::Mul(self.id, other.id))
    }

    /// Adds a `1 x n` row to every row of `self`.
    pub fn add_row(&self, row: &Var) -> Var {
        let a = self.value();
        let b = row.value();
        assert_eq!(b.nrows(), 1, "add_row: bias must have one row");
        assert_eq!(a.ncols(), b.ncols(), "add_row: column mismatch");
        self.binary(row, &*a + &*b, Op::AddRow(self.id, row.id))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(self.value().mapv(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(self.value().mapv(|x| x + c), Op::AddScalar(self.id))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&self, m: Mat) -> Var {
        self.mul_const_rc(Rc::new(m))
    }

    fn mul_const_rc(&self, m: Rc<Mat>) -> Var {
        let a = self.value();
        assert_eq!(a.dim(), m.dim(), "mul_const: shape mismatch");
        self.unary(&*a * &*m, Op::MulConst(self.id, m))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimension mismatch");
        self.binary(other, a.dot(&*b), Op::MatMul(self.id, other.id))
    }

    pub fn t(&self) -> Var {
        let v = self.value().t().as_standard_layout().into_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var {
        self.unary(self.value().mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary(self.value().mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var {
        self.unary(self.value().mapv(f64::ln), Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(self.value().mapv(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn recip(&self) -> Var {
        self.unary(self.value().mapv(|x| 1.0 / x), Op::Recip(self.id))
    }

    pub fn abs(&self) -> Var {
        self.unary(self.value().mapv(f64::abs), Op::Abs(self.id))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self
            .value()
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    /// Sum of all entries, as a 1x1 value.
    pub fn sum(&self) -> Var {
        let s = self.value().sum();
        self.unary(Mat::from_elem((1, 1), s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn broadcast_scalar(&self, rows: usize, cols: usize) -> Var {
        let x = self.item();
        self.unary(
            Mat::from_elem((rows, cols), x),
            Op::BroadcastScalar(self.id),
        )
    }

    /// Column sums as a `1 x n` row.
    pub fn sum_rows(&self) -> Var {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(v, Op::SumRows(self.id))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&self, rows: usize) -> Var {
        let a = self.value();
        assert_eq!(a.nrows(), 1, "broadcast_rows: expected one row");
        let v = a.broadcast((rows, a.ncols())).unwrap().to_owned();
        self.unary(v, Op::BroadcastRows(self.id))
    }

    /// Row sums as an `m x 1` column.
    pub fn sum_cols(&self) -> Var {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(v, Op::SumCols(self.id))
    }

    /// Repeats an `m x 1` column `cols` times.
    pub fn broadcast_cols(&self, cols: usize) -> Var {
        let a = self.value();
        assert_eq!(a.ncols(), 1, "broadcast_cols: expected one column");
        let v = a.broadcast((a.nrows(), cols)).unwrap().to_owned();
        self.unary(v, Op::BroadcastCols(self.id))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let a = self.value();
        let total = a.ncols();
        assert!(start + len <= total, "slice_cols out of range");
        let v = a.slice(s![.., start..start + len]).to_owned();
        self.unary(v, Op::SliceCols(self.id, start, total))
    }

    /// Embeds `self` at column `start` of a zero matrix with `total` columns.
    pub fn pad_cols(&self, start: usize, total: usize) -> Var {
        let a = self.value();
        assert!(start + a.ncols() <= total, "pad_cols out of range");
        let mut v = Mat::zeros((a.nrows(), total));
        v.slice_mut(s![.., start..start + a.ncols()]).assign(&*a);
        self.unary(v, Op::PadCols(self.id, start))
    }

    pub fn concat_cols(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.nrows(), b.nrows(), "concat_cols: row mismatch");
        let v = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap();
        self.binary(other, v, Op::ConcatCols(self.id, other.id))
    }

    /// Unfolds `(batch * t_in, c_in)` into `(batch * t_out, kernel * c_in)`.
    pub fn im2col(&self, geom: ConvGeom) -> Var {
        let v = im2col_value(&self.value(), &geom);
        self.unary(v, Op::Im2Col(self.id, geom))
    }

    /// Adjoint of [`Var::im2col`]: scatter-adds columns back onto the time axis.
    pub fn col2im(&self, geom: ConvGeom) -> Var {
        let v = col2im_value(&self.value(), &geom);
        self.unary(v, Op::Col2Im(self.id, geom))
    }

    /// Sums consecutive groups of `len` rows: `(g * len, c) -> (g, c)`.
    pub fn group_sum(&self, len: usize) -> Var {
        let a = self.value();
        assert!(len > 0 && a.nrows() % len == 0, "group_sum: rows not divisible");
        let groups = a.nrows() / len;
        let v = a
            .to_shape((groups, len, a.ncols()))
            .unwrap()
            .sum_axis(Axis(1));
        self.unary(v, Op::GroupSum(self.id, len))
    }

    /// Repeats every row `len` times: `(g, c) -> (g * len, c)`.
    pub fn group_repeat(&self, len: usize) -> Var {
        let a = self.value();
        let (g, c) = a.dim();
        let mut v = Mat::zeros((g * len, c));
        for (i, row) in a.rows().into_iter().enumerate() {
            for j in 0..len {
                v.row_mut(i * len + j).assign(&row);
            }
        }
        self.unary(v, Op::GroupRepeat(self.id, len))
    }

    /// Mean over consecutive groups of `len` rows.
    pub fn group_mean(&self, len: usize) -> Var {
        self.group_sum(len).scale(1.0 / len as f64)
    }
}

fn im2col_value(x: &Mat, g: &ConvGeom) -> Mat {
    assert_eq!(
        x.dim(),
        (g.batch * g.t_in, g.c_in),
        "im2col: input shape does not match geometry"
    );
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let width = g.kernel * g.c_in;
    let mut out = vec![0.0; g.batch * g.t_out * width];
    for b in 0..g.batch {
        for t in 0..g.t_out {
            let row = (b * g.t_out + t) * width;
            for k in 0..g.kernel {
                let src = (t * g.stride + k) as isize - g.pad_left as isize;
                if src < 0 || src as usize >= g.t_in {
                    continue;
                }
                let from = (b * g.t_in + src as usize) * g.c_in;
                let to = row + k * g.c_in;
                out[to..to + g.c_in].copy_from_slice(&xs[from..from + g.c_in]);
            }
        }
    }
    Mat::from_shape_vec((g.batch * g.t_out, width), out).unwrap()
}

fn col2im_value(cols: &Mat, g: &ConvGeom) -> Mat {
    let width = g.kernel * g.c_in;
    assert_eq!(
        cols.dim(),
        (g.batch * g.t_out, width),
        "col2im: input shape does not match geometry"
    );
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let mut out = vec![0.0; g.batch * g.t_in * g.c_in];
    for b in 0..g.batch {
        for t in 0..g.t_out {
            let row = (b * g.t_out + t) * width;
            for k in 0..g.kernel {
                let src = (t * g.stride + k) as isize - g.pad_left as isize;
                if src < 0 || src as usize >= g.t_in {
                    continue;
                }
                let to = (b * g.t_in + src as usize) * g.c_in;
                let from = row + k * g.c_in;
                for c in 0..g.c_in {
                    out[to + c] += cs[from + c];
                }
            }
        }
    }
    Mat::from_shape_vec((g.batch * g.t_in, g.c_in), out).unwrap()
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident) => {
        impl ops::$trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$method(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add);
impl_binop!(Sub, sub);
impl_binop!(Mul, mul);

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: &dyn Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        let diff = (a - b).mapv(f64::abs).sum();
        let scale = a.mapv(f64::abs).sum().max(b.mapv(f64::abs).sum()).max(1e-12);
        assert!(diff / scale < tol, "relative error {} >= {tol}", diff / scale);
    }

    #[test]
    fn matmul_sigmoid_gradient() {
        let x0 = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]];
        let w = array![[0.2, -0.1], [0.5, 0.3], [-0.4, 0.8]];
        let f = |x: &Mat| {
            let t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.constant(w.clone());
            xv.matmul(&wv).sigmoid().tanh().sum().item()
        };
        let t = Tape::new();
        let xv = t.param(x0.clone());
        let wv = t.constant(w.clone());
        let y = xv.matmul(&wv).sigmoid().tanh().sum();
        let g = t.grad(&y, &[&xv]);
        assert_close(&g[0].value(), &numeric_grad(&f, &x0), 1e-7);
    }

    #[test]
    fn im2col_is_adjoint_of_col2im() {
        let geom = ConvGeom::new(2, 7, 3, 4, 2, 1, 1).unwrap();
        assert_eq!(geom.t_out, 3);
        let x = Mat::from_shape_fn((14, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 1.0);
        let y = Mat::from_shape_fn((6, 12), |(i, j)| ((i * 12 + j) % 7) as f64 - 3.0);
        let lhs = (im2col_value(&x, &geom) * &y).sum();
        let rhs = (x * col2im_value(&y, &geom)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn second_order_through_gradient_norm() {
        // f(w) = || d/dx sum(tanh(x w)) ||^2, differentiated w.r.t. w.
        let x = array![[0.3, -0.2], [0.1, 0.4]];
        let w0 = array![[0.2, -0.1], [0.5, 0.3]];
        let f = |w: &Mat| {
            let t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.constant(w.clone());
            let y = xv.matmul(&wv).tanh().sum();
            let gx = &t.grad(&y, &[&xv])[0];
            gx.square().sum().item()
        };
        let t = Tape::new();
        let xv = t.param(x.clone());
        let wv = t.param(w0.clone());
        let y = xv.matmul(&wv).tanh().sum();
        let gx = t.grad(&y, &[&xv])[0].clone();
        let pen = gx.square().sum();
        let gw = t.grad(&pen, &[&wv]);
        assert_close(&gw[0].value(), &numeric_grad(&f, &w0), 1e-7);
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let t = Tape::new();
        let a = t.param(array![[1.0, 2.0]]);
        let b = t.param(array![[3.0, 4.0]]);
        let y = a.square().sum();
        let g = t.grad(&y, &[&a, &b]);
        assert_eq!(*g[0].value(), array![[2.0, 4.0]]);
        assert_eq!(*g[1].value(), array![[0.0, 0.0]]);
    }

    #[test]
    fn group_ops_are_adjoint() {
        let t = Tape::new();
        let a = t.param(Mat::from_shape_fn((6, 2), |(i, j)| (i + j) as f64));
        let s = a.group_sum(3);
        assert_eq!(*s.value(), array![[3.0, 6.0], [12.0, 15.0]]);
        let r = s.group_repeat(3);
        assert_eq!(r.shape(), (6, 2));
        let g = t.grad(&r.sum(), &[&a]);
        assert!(g[0].value().iter().all(|&v| v == 3.0));
    }
}
