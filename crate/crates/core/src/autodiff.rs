//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a node holding its
//! forward value and enough context to run the backward pass. Nodes are
//! appended in evaluation order, so walking the tape in reverse is a valid
//! topological order for gradient propagation.
//!
//! Matrices are row-major `[rows, cols]`. Feature maps are stored
//! channels-last as `[height * width, channels]` so per-pixel linear maps are
//! plain matrix products.

use std::fmt;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with shape {:?}", self.shape);
        self.data[0]
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatView {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl MatView {
    fn dense(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1 }
    }

    fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = alpha * a * b + beta * c` on strided views.
fn gemm(alpha: f64, a: &[f64], av: MatView, b: &[f64], bv: MatView, beta: f64, c: &mut [f64], cv: MatView) {
    assert_eq!(av.cols, bv.rows);
    assert_eq!(av.rows, cv.rows);
    assert_eq!(bv.cols, cv.cols);
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the views describe in-bounds strided access into the slices; the
    // asserts above and the constructors below guarantee the extents.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

#[derive(Clone, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    Im2Col { x: Var, geom: ConvGeom },
    UpsampleNearest { x: Var, h: usize, w: usize, c: usize, factor: usize },
    GatherRows(Var, Vec<usize>),
    GatherElements(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    BceWithLogits { x: Var, targets: Vec<f64> },
    SigmoidFocal { x: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations; build a fresh one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn bce_with_logits_scalar(x: f64, t: f64) -> f64 {
    softplus(x) - x * t
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn focal_scalar(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let ce = bce_with_logits_scalar(x, t);
    let pt = p * t + (1.0 - p) * (1.0 - t);
    let at = alpha * t + (1.0 - alpha) * (1.0 - t);
    let one_m = 1.0 - pt;
    let mod_f = one_m.powf(gamma);
    let loss = at * mod_f * ce;
    let dpt = (2.0 * t - 1.0) * p * (1.0 - p);
    let dmod = if gamma == 0.0 { 0.0 } else { -gamma * one_m.powf(gamma - 1.0) * dpt };
    let grad = at * (dmod * ce + mod_f * (p - t));
    (loss, grad)
}

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.data.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[bias.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(vb.len(), n, "bias length mismatch");
        let mut data = vx.data.clone();
        for r in 0..m {
            for (d, b) in data[r * n..(r + 1) * n].iter_mut().zip(&vb.data) {
                *d += b;
            }
        }
        let t = Tensor::new(vx.shape.clone(), data);
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddRowBroadcast(x, bias), rg)
    }

    /// `[m, n] * [n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vs = &self.nodes[s.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(vs.len(), n);
        let mut data = vx.data.clone();
        for r in 0..m {
            for (d, b) in data[r * n..(r + 1) * n].iter_mut().zip(&vs.data) {
                *d *= b;
            }
        }
        let t = Tensor::new(vx.shape.clone(), data);
        let rg = self.rg(x) || self.rg(s);
        self.push(t, Op::MulRowBroadcast(x, s), rg)
    }

    /// `[m, n] * [m]`, each row scaled by its own factor.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vs = &self.nodes[s.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(vs.len(), m);
        let mut data = vx.data.clone();
        for r in 0..m {
            for d in &mut data[r * n..(r + 1) * n] {
                *d *= vs.data[r];
            }
        }
        let t = Tensor::new(vx.shape.clone(), data);
        let rg = self.rg(x) || self.rg(s);
        self.push(t, Op::MulColBroadcast(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let t = Tensor::new(vx.shape.clone(), vx.data.iter().map(|v| v * k).collect());
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let t = Tensor::new(vx.shape.clone(), vx.data.iter().map(|v| v + k).collect());
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    fn view_of(&self, v: Var, trans: bool) -> MatView {
        let t = &self.nodes[v.0].value;
        let mv = MatView::dense(t.rows(), t.cols());
        if trans {
            mv.t()
        } else {
            mv
        }
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let av = self.view_of(a, ta);
        let bv = self.view_of(b, tb);
        assert_eq!(av.cols, bv.rows, "matmul inner dimension mismatch: {:?} x {:?}", self.shape(a), self.shape(b));
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            &self.nodes[a.0].value.data,
            av,
            &self.nodes[b.0].value.data,
            bv,
            0.0,
            &mut out,
            MatView::dense(m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let vx = &self.nodes[x.0].value;
        let t = Tensor::new(vx.shape.clone(), vx.data.iter().map(|v| f(*v)).collect());
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = vx.data.clone();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(vx.shape.clone(), data);
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = vx.data.clone();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(vx.shape.clone(), data);
        let rg = self.rg(x);
        self.push(t, Op::LogSoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &vx.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape.clone(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(t, Op::LayerNormRows { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Scales every row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = vx.data.clone();
        let mut norms = vec![0.0; m];
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let nm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms[r] = nm;
            for v in row.iter_mut() {
                *v /= nm;
            }
        }
        let t = Tensor::new(vx.shape.clone(), data);
        let rg = self.rg(x);
        self.push(t, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = vx.data[r * n + c];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, m], data), Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let vx = &self.nodes[x.0].value;
        let t = Tensor::new(shape, vx.data.clone());
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Unfolds a channels-last `[h*w, c]` map into `[oh*ow, k*k*c]` patches.
    pub fn im2col(&mut self, x: Var, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.rows(), h * w, "im2col spatial mismatch");
        let c = vx.cols();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let kc = k * k * c;
        let mut out = vec![0.0; oh * ow * kc];
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = (oy * ow + ox) * kc;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let dst = orow + (ky * k + kx) * c;
                        out[dst..dst + c].copy_from_slice(&vx.data[src..src + c]);
                    }
                }
            }
        }
        let geom = ConvGeom { h, w, c, k, stride, pad, oh, ow };
        let rg = self.rg(x);
        self.push(Tensor::new(vec![oh * ow, kc], out), Op::Im2Col { x, geom }, rg)
    }

    /// Nearest-neighbour upsampling of a channels-last `[h*w, c]` map.
    pub fn upsample_nearest(&mut self, x: Var, h: usize, w: usize, factor: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.rows(), h * w);
        let c = vx.cols();
        let (uh, uw) = (h * factor, w * factor);
        let mut out = vec![0.0; uh * uw * c];
        for y in 0..uh {
            for xx in 0..uw {
                let src = ((y / factor) * w + xx / factor) * c;
                let dst = (y * uw + xx) * c;
                out[dst..dst + c].copy_from_slice(&vx.data[src..src + c]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![uh * uw, c], out), Op::UpsampleNearest { x, h, w, c, factor }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        let n = vx.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(vx.row(i));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![idx.len(), n], out), Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Picks flat elements into a 1-d tensor.
    pub fn gather_elements(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        let out = idx.iter().map(|&i| vx.data[i]).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![idx.len()], out), Op::GatherElements(x, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let n = self.nodes[xs[0].0].value.cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &x in xs {
            let v = &self.nodes[x.0].value;
            assert_eq!(v.cols(), n, "concat_rows width mismatch");
            out.extend_from_slice(&v.data);
            m += v.rows();
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(vec![m, n], out), Op::ConcatRows(xs.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        assert!(start <= end && end <= n);
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&vx.data[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![m, w], out), Op::SliceCols { x, start, end }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column sums: `[m, n] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(&v.data[r * n..(r + 1) * n]) {
                *o += x;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n], out), Op::SumRows(x), rg)
    }

    /// Row sums: `[m, n] -> [m]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let (m, n) = (v.rows(), v.cols());
        let out = (0..m).map(|r| v.data[r * n..(r + 1) * n].iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![m], out), Op::SumCols(x), rg)
    }

    /// Elementwise binary cross-entropy on logits against fixed targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.len(), targets.len());
        let out = vx.data.iter().zip(targets).map(|(&l, &t)| bce_with_logits_scalar(l, t)).collect();
        let t = Tensor::new(vx.shape.clone(), out);
        let rg = self.rg(x);
        self.push(t, Op::BceWithLogits { x, targets: targets.to_vec() }, rg)
    }

    /// Elementwise sigmoid focal loss on logits against fixed targets.
    pub fn sigmoid_focal(&mut self, x: Var, targets: &[f64], alpha: f64, gamma: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.len(), targets.len());
        let out = vx
            .data
            .iter()
            .zip(targets)
            .map(|(&l, &t)| focal_scalar(l, t, alpha, gamma).0)
            .collect();
        let t = Tensor::new(vx.shape.clone(), out);
        let rg = self.rg(x);
        self.push(t, Op::SigmoidFocal { x, targets: targets.to_vec(), alpha, gamma }, rg)
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        let d = Self::acc(grads, v, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    let d = Self::acc(grads, *a, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if rg(*b) {
                    let d = Self::acc(grads, *b, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data.clone(), val(*b).data.clone());
                if rg(*a) {
                    let d = Self::acc(grads, *a, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * vb[k];
                    }
                }
                if rg(*b) {
                    let d = Self::acc(grads, *b, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * va[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data.clone(), val(*b).data.clone());
                if rg(*a) {
                    let d = Self::acc(grads, *a, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] / vb[k];
                    }
                }
                if rg(*b) {
                    let d = Self::acc(grads, *b, g.len());
                    for k in 0..g.len() {
                        d[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                }
            }
            Op::AddRowBroadcast(x, bias) => {
                let n = val(*bias).len();
                if rg(*x) {
                    let d = Self::acc(grads, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if rg(*bias) {
                    let d = Self::acc(grads, *bias, n);
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv;
                    }
                }
            }
            Op::MulRowBroadcast(x, s) => {
                let n = val(*s).len();
                let vs = val(*s).data.clone();
                let vx = val(*x).data.clone();
                if rg(*x) {
                    let d = Self::acc(grads, *x, g.len());
                    for (k, gv) in g.iter().enumerate() {
                        d[k] += gv * vs[k % n];
                    }
                }
                if rg(*s) {
                    let d = Self::acc(grads, *s, n);
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv * vx[k];
                    }
                }
            }
            Op::MulColBroadcast(x, s) => {
                let m = val(*s).len();
                let n = g.len() / m.max(1);
                let vs = val(*s).data.clone();
                let vx = val(*x).data.clone();
                if rg(*x) {
                    let d = Self::acc(grads, *x, g.len());
                    for (k, gv) in g.iter().enumerate() {
                        d[k] += gv * vs[k / n];
                    }
                }
                if rg(*s) {
                    let d = Self::acc(grads, *s, m);
                    for (k, gv) in g.iter().enumerate() {
                        d[k / n] += gv * vx[k];
                    }
                }
            }
            Op::Scale(x, k) => {
                if rg(*x) {
                    let d = Self::acc(grads, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * k);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if rg(*x) {
                    let d = Self::acc(grads, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = self.view_of(*a, *ta);
                let bv = self.view_of(*b, *tb);
                let (m, n) = (av.rows, bv.cols);
                let gv = MatView::dense(m, n);
                if rg(*a) {
                    // d op(a) = g * op(b)^T, written through op's strides.
                    let sa = val(*a);
                    let mut dv = MatView::dense(sa.rows(), sa.cols());
                    if *ta {
                        dv = dv.t();
                    }
                    let len = sa.len();
                    let bdata = val(*b).data.clone();
                    let d = Self::acc(grads, *a, len);
                    gemm(1.0, g, gv, &bdata, bv.t(), 1.0, d, dv);
                }
                if rg(*b) {
                    let sb = val(*b);
                    let mut dv = MatView::dense(sb.rows(), sb.cols());
                    if *tb {
                        dv = dv.t();
                    }
                    let len = sb.len();
                    let adata = val(*a).data.clone();
                    let d = Self::acc(grads, *b, len);
                    gemm(1.0, &adata, av.t(), g, gv, 1.0, d, dv);
                }
            }
            Op::Relu(x) => {
                if rg(*x) {
                    let vx = val(*x).data.clone();
                    let d = Self::acc(grads, *x, g.len());
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if rg(*x) {
                    let d = Self::acc(grads, *x, g.len());
                    for k in 0..g.len() {
                        let y = out.data[k];
                        d[k] += g[k] * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(x) => {
                if rg(*x) {
                    let d = Self::acc(grads, *x, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * out.data[k];
                    }
                }
            }
            Op::Log(x) => {
                if rg(*x) {
                    let vx = val(*x).data.clone();
                    let d = Self::acc(grads, *x, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] / vx[k];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if rg(*x) {
                    let (m, n) = (out.rows(), out.cols());
                    let d = Self::acc(grads, *x, g.len());
                    for r in 0..m {
                        let y = &out.data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if rg(*x) {
                    let (m, n) = (out.rows(), out.cols());
                    let d = Self::acc(grads, *x, g.len());
                    for r in 0..m {
                        let y = &out.data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            d[r * n + j] += gr[j] - y[j].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNormRows { x, gain, bias, xhat, inv_std } => {
                let (m, n) = (out.rows(), out.cols());
                let gw = val(*gain).data.clone();
                if rg(*gain) {
                    let d = Self::acc(grads, *gain, n);
                    for k in 0..g.len() {
                        d[k % n] += g[k] * xhat[k];
                    }
                }
                if rg(*bias) {
                    let d = Self::acc(grads, *bias, n);
                    for k in 0..g.len() {
                        d[k % n] += g[k];
                    }
                }
                if rg(*x) {
                    let d = Self::acc(grads, *x, g.len());
                    for r in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = g[r * n + j] * gw[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * n + j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let dxh = g[r * n + j] * gw[j];
                            d[r * n + j] += inv_std[r] / nf * (nf * dxh - s1 - xhat[r * n + j] * s2);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if rg(*x) {
                    let (m, n) = (out.rows(), out.cols());
                    let d = Self::acc(grads, *x, g.len());
                    for r in 0..m {
                        let y = &out.data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += (gr[j] - y[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if rg(*x) {
                    let (m, n) = (out.rows(), out.cols());
                    let d = Self::acc(grads, *x, g.len());
                    for r in 0..m {
                        for c in 0..n {
                            d[c * m + r] += g[r * n + c];
                        }
                    }
                }
            }
            Op::Im2Col { x, geom } => {
                if rg(*x) {
                    let ConvGeom { h, w, c, k, stride, pad, oh, ow } = geom.clone();
                    let kc = k * k * c;
                    let d = Self::acc(grads, *x, h * w * c);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let orow = (oy * ow + ox) * kc;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * w + ix as usize) * c;
                                    let src = orow + (ky * k + kx) * c;
                                    for ch in 0..c {
                                        d[dst + ch] += g[src + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest { x, h, w, c, factor } => {
                if rg(*x) {
                    let (h, w, c, f) = (*h, *w, *c, *factor);
                    let uw = w * f;
                    let d = Self::acc(grads, *x, h * w * c);
                    for y in 0..h * f {
                        for xx in 0..uw {
                            let dst = ((y / f) * w + xx / f) * c;
                            let src = (y * uw + xx) * c;
                            for ch in 0..c {
                                d[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                if rg(*x) {
                    let vx = val(*x);
                    let n = vx.cols();
                    let d = Self::acc(grads, *x, vx.len());
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            d[src * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::GatherElements(x, idx) => {
                if rg(*x) {
                    let len = val(*x).len();
                    let d = Self::acc(grads, *x, len);
                    for (k, &src) in idx.iter().enumerate() {
                        d[src] += g[k];
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    if rg(x) {
                        let d = Self::acc(grads, x, len);
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(d, g)| *d += g);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start, end } => {
                if rg(*x) {
                    let vx = val(*x);
                    let (m, n) = (vx.rows(), vx.cols());
                    let w = end - start;
                    let d = Self::acc(grads, *x, m * n);
                    for r in 0..m {
                        for j in 0..w {
                            d[r * n + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    let len = val(*x).len();
                    let d = Self::acc(grads, *x, len);
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let len = val(*x).len();
                    let d = Self::acc(grads, *x, len);
                    let k = g[0] / len.max(1) as f64;
                    d.iter_mut().for_each(|d| *d += k);
                }
            }
            Op::SumRows(x) => {
                if rg(*x) {
                    let len = val(*x).len();
                    let n = g.len();
                    let d = Self::acc(grads, *x, len);
                    for k in 0..len {
                        d[k] += g[k % n];
                    }
                }
            }
            Op::SumCols(x) => {
                if rg(*x) {
                    let len = val(*x).len();
                    let m = g.len();
                    let n = len / m.max(1);
                    let d = Self::acc(grads, *x, len);
                    for k in 0..len {
                        d[k] += g[k / n];
                    }
                }
            }
            Op::BceWithLogits { x, targets } => {
                if rg(*x) {
                    let vx = val(*x).data.clone();
                    let d = Self::acc(grads, *x, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * (sigmoid(vx[k]) - targets[k]);
                    }
                }
            }
            Op::SigmoidFocal { x, targets, alpha, gamma } => {
                if rg(*x) {
                    let vx = val(*x).data.clone();
                    let d = Self::acc(grads, *x, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * focal_scalar(vx[k], targets[k], *alpha, *gamma).1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compares tape gradients of `f` against central differences for every input.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.backward(out);
        let analytic: Vec<Vec<f64>> =
            vars.iter().zip(&inputs).map(|(v, t)| g.grad(*v).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.len()])).collect();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let o = f(&mut g, &vars);
            g.value(o).item()
        };
        let h = 1e-6;
        for (vi, t) in inputs.iter().enumerate() {
            for k in 0..t.len() {
                let mut plus = inputs.clone();
                plus[vi].data[k] += h;
                let mut minus = inputs.clone();
                minus[vi].data[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic[vi][k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-5, "input {vi} elem {k}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_tensor(&mut rng, vec![4, 3]) } else { rand_tensor(&mut rng, vec![3, 4]) };
            let b = if tb { rand_tensor(&mut rng, vec![5, 4]) } else { rand_tensor(&mut rng, vec![4, 5]) };
            let w = rand_tensor(&mut rng, vec![3, 5]);
            check(vec![a, b, w], |g, v| {
                let p = g.matmul_t(v[0], ta, v[1], tb);
                let q = g.mul(p, v[2]);
                g.sum(q)
            });
        }
    }

    #[test]
    fn elementwise_and_row_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4]);
        let s = rand_tensor(&mut rng, vec![3]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        check(vec![x, b, s, w], |g, v| {
            let y = g.add_row(v[0], v[1]);
            let y = g.mul_row(y, v[1]);
            let y = g.mul_col(y, v[2]);
            let y = g.sigmoid(y);
            let sm = g.softmax_rows(y);
            let ls = g.log_softmax_rows(v[3]);
            let n = g.normalize_rows(v[0]);
            let z = g.mul(sm, ls);
            let z = g.add(z, n);
            let z = g.sub(z, v[3]);
            let d = g.exp(v[3]);
            let z = g.div(z, d);
            let z = g.scale(z, 0.7);
            let e = g.exp(z);
            let r = g.sum_rows(e);
            let c = g.sum_cols(e);
            let r = g.sum(r);
            let c = g.mean(c);
            let t = g.add(r, c);
            let l = g.log(t);
            g.add_scalar(l, 1.0)
        });
    }

    #[test]
    fn layer_norm_and_structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![4, 5]);
        let gain = rand_tensor(&mut rng, vec![5]);
        let bias = rand_tensor(&mut rng, vec![5]);
        let w = rand_tensor(&mut rng, vec![5, 4]);
        check(vec![x, gain, bias, w], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let yt = g.transpose(y);
            let p = g.mul(yt, v[3]);
            let rows = g.gather_rows(y, &[2, 0, 2]);
            let cols = g.slice_cols(rows, 1, 4);
            let c = g.concat_rows(&[cols, cols]);
            let r = g.reshape(c, vec![18]);
            let el = g.gather_elements(r, &[0, 5, 5, 17]);
            let s1 = g.sum(p);
            let s2 = g.sum(el);
            let sq = g.mul(r, r);
            let s3 = g.mean(sq);
            let a = g.add(s1, s2);
            g.add(a, s3)
        });
    }

    #[test]
    fn conv_and_upsample_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![25, 2]);
        let w = rand_tensor(&mut rng, vec![18, 3]);
        let m = rand_tensor(&mut rng, vec![36, 3]);
        check(vec![x, w, m], |g, v| {
            let cols = g.im2col(v[0], 5, 5, 3, 2, 1);
            let y = g.matmul(cols, v[1]);
            let y = g.relu(y);
            let u = g.upsample_nearest(y, 3, 3, 2);
            let p = g.mul(u, v[2]);
            g.sum(p)
        });
    }

    #[test]
    fn pointwise_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![12]);
        let t: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let t2 = t.clone();
        check(vec![x.clone()], move |g, v| {
            let l = g.bce_with_logits(v[0], &t);
            g.sum(l)
        });
        check(vec![x], move |g, v| {
            let l = g.sigmoid_focal(v[0], &t2, 0.25, 2.0);
            g.sum(l)
        });
    }

    #[test]
    fn detached_and_constant_nodes_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let d = g.detach(p);
        let a = g.mul(p, c);
        let b = g.mul(a, d);
        let s = g.sum(b);
        g.backward(s);
        assert_eq!(g.grad(p).unwrap(), &[3.0, 8.0]);
        assert!(g.grad(c).is_none());
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn normalize_rows_keeps_zero_rows_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]));
        let y = g.normalize_rows(x);
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 0.6, 0.8]);
    }
}
