//! Parameter storage, layer building blocks, and optimizers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter arrays, iterated in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Lazily binds parameters of one store onto a graph.
pub struct Bound<'a> {
    pub store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Bound<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, vars: vec![None; store.len()], trainable: true }
    }

    /// Binds every parameter as a constant (frozen teacher, evaluation).
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, vars: vec![None; store.len()], trainable: false }
    }

    pub fn p(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients for every bound parameter after `g.backward`.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| v.and_then(|v| g.grad(v).map(<[f64]>::to_vec))).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, vec![d_in, d_out], bound));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var) -> Var {
        let w = p.p(g, self.w);
        let b = p.p(g, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// 2-d convolution on channels-last maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub lin: Linear,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = k * k * c_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, vec![fan_in, c_out], bound));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self { lin: Linear { w, b }, k, stride, pad }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let cols = g.im2col(x, h, w, self.k, self.stride, self.pad);
        let y = self.lin.forward(g, p, cols);
        (y, self.out_size(h), self.out_size(w))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::new(vec![d], vec![1.0; d]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var) -> Var {
        let gain = p.p(g, self.gain);
        let bias = p.p(g, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Single-head scaled dot-product attention with input/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub d: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, d_kv: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d_kv, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d_kv, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            d,
        }
    }

    /// `mask` is an additive `[rows(x), rows(kv)]` bias (0 or a large negative).
    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var, kv: Var, mask: Option<Tensor>) -> Var {
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, kv);
        let v = self.v.forward(g, p, kv);
        let s = g.matmul_t(q, false, k, true);
        let mut s = g.scale(s, 1.0 / (self.d as f64).sqrt());
        if let Some(m) = mask {
            let m = g.constant(m);
            s = g.add(s, m);
        }
        let a = g.softmax_rows(s);
        let y = g.matmul(a, v);
        self.o.forward(g, p, y)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d, hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var) -> Var {
        let h = self.l1.forward(g, p, x);
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }
}

pub fn init_embedding(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n: usize, d: usize) -> ParamId {
    store.add(name, uniform(rng, vec![n, d], 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Exponent of the poly schedule `lr * (1 - iter/max_iter)^power`.
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::AdamW, lr: 0.01, poly_power: 0.9, momentum: 0.9, weight_decay: 1e-4, grad_clip: 1.0 }
    }
}

pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    base * (1.0 - iter.min(max_iter) as f64 / max_iter as f64).powf(power)
}

/// Per-parameter first/second moment state.
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { cfg, m, v, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let mut scale = 1.0;
        if self.cfg.grad_clip > 0.0 {
            let norm: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                scale = self.cfg.grad_clip / norm;
            }
        }
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(ParamId(i));
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    let m = &mut self.m[i];
                    for k in 0..g.len() {
                        let gk = g[k] * scale + self.cfg.weight_decay * p.data[k];
                        m[k] = self.cfg.momentum * m[k] + gk;
                        p.data[k] -= lr * m[k];
                    }
                }
                OptimizerKind::AdamW => {
                    let bc1 = 1.0 - b1.powi(self.t as i32);
                    let bc2 = 1.0 - b2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..g.len() {
                        let gk = g[k] * scale;
                        m[k] = b1 * m[k] + (1.0 - b1) * gk;
                        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                        let upd = (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                        p.data[k] -= lr * (upd + self.cfg.weight_decay * p.data[k]);
                    }
                }
            }
        }
    }
}

/// Adds `src` into `dst`, allocating on first use.
pub fn accumulate(dst: &mut Vec<Option<Vec<f64>>>, src: Vec<Option<Vec<f64>>>, weight: f64) {
    if dst.len() < src.len() {
        dst.resize(src.len(), None);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            match d {
                Some(d) => d.iter_mut().zip(&s).for_each(|(a, b)| *a += weight * b),
                None => *d = Some(s.into_iter().map(|v| v * weight).collect()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn poly_schedule_decays_to_zero() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert!((poly_lr(0.01, 50, 100, 0.9) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let cfg = OptimizerConfig { weight_decay: 0.0, grad_clip: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &store);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let mut b = Bound::trainable(&store);
            let x = b.p(&mut g, id);
            let sq = g.mul(x, x);
            let l = g.sum(sq);
            g.backward(l);
            let grads = b.grads(&g);
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn attention_rows_are_convex_combinations_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, &mut rng, "att", 4, 4);
        let mut g = Graph::new();
        let mut b = Bound::frozen(&store);
        let x = g.constant(uniform(&mut rng, vec![3, 4], 1.0));
        let kv = g.constant(uniform(&mut rng, vec![5, 4], 1.0));
        // Masking all but one key makes every output row equal o(v(kv[0])).
        let mut mask = vec![-1e9; 15];
        for r in 0..3 {
            mask[r * 5] = 0.0;
        }
        let y = att.forward(&mut g, &mut b, x, kv, Some(Tensor::new(vec![3, 5], mask)));
        let yv = g.value(y).clone();
        for r in 1..3 {
            for c in 0..4 {
                assert!((yv.row(r)[c] - yv.row(0)[c]).abs() < 1e-12);
            }
        }
    }
}
