//! Shared encoder with mask-classification and caption decoders.
//!
//! Spatial maps are channels-last: a `[h*w, c]` matrix per image.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{init_embedding, Attention, Bound, Conv2d, FeedForward, LayerNorm, Linear, ParamId, ParamStore};
use crate::synthdata::CHANNELS;

/// Coordinate channels appended to the image.
const COORDS: usize = 2;
const STEM_CHANNELS: usize = 16;
const DOWN_CHANNELS: usize = 32;
const PIXEL_HIDDEN: usize = 16;
const NEG_INF: f64 = -1e9;
pub const STRIDE: usize = 4;
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cpp,
    /// Mask decoder with cross-attention restricted to the previous mask foreground.
    CppPlus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// `N_c`.
    pub feature_channels: usize,
    /// `C_e`.
    pub embed_dim: usize,
    /// Width of both decoders.
    pub hidden_dim: usize,
    pub num_queries: usize,
    pub mask_layers: usize,
    pub caption_layers: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub variant: Variant,
    /// Initial sigmoid output of a freshly added class column.
    pub class_prior: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            feature_channels: 32,
            embed_dim: 16,
            hidden_dim: 32,
            num_queries: 20,
            mask_layers: 2,
            caption_layers: 2,
            vocab_size: 35,
            max_caption_len: 28,
            variant: Variant::Cpp,
            class_prior: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_channels,
            self.embed_dim,
            self.hidden_dim,
            self.num_queries,
            self.mask_layers,
            self.caption_layers,
            self.vocab_size,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.image_size < 8 || self.image_size % STRIDE != 0 {
            return Err(Error::Config(format!("image size {} must be a multiple of {STRIDE} and >= 8", self.image_size)));
        }
        if self.max_caption_len < 2 {
            return Err(Error::Config("max caption length must allow START and END".into()));
        }
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return Err(Error::Config(format!("class prior {} outside (0, 1)", self.class_prior)));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / STRIDE
    }
}

#[derive(Clone, Debug)]
struct QueryLayer {
    cross: Attention,
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

#[derive(Clone, Debug)]
struct CaptionLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    cross: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

#[derive(Clone, Debug)]
struct Net {
    stem: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    cce1: Linear,
    cce2: Linear,
    pix_feat: Linear,
    pix_skip: Linear,
    pix_out: Linear,
    low_out: Linear,
    mem_proj: Linear,
    mem_pos: ParamId,
    queries: ParamId,
    query_layers: Vec<QueryLayer>,
    query_ln: LayerNorm,
    class_head: Linear,
    pool_head: Linear,
    pool_feat_head: Linear,
    mask_mlp: FeedForward,
    mask_out: Linear,
    tok_emb: ParamId,
    pos_emb: ParamId,
    cap_mem: Linear,
    cap_layers: Vec<CaptionLayer>,
    cap_ln: LayerNorm,
    cap_out: Linear,
    text_proj: Linear,
}

/// Appends `k` zero weight columns and `bias_init` bias entries to `head`.
fn widen_columns(store: &mut ParamStore, head: Linear, k: usize, bias_init: f64) {
    let w = store.get(head.w).clone();
    let (d, old_c) = (w.rows(), w.cols());
    let mut data = Vec::with_capacity(d * (old_c + k));
    for r in 0..d {
        data.extend_from_slice(&w.data[r * old_c..(r + 1) * old_c]);
        data.extend(std::iter::repeat_n(0.0, k));
    }
    *store.get_mut(head.w) = Tensor::new(vec![d, old_c + k], data);
    let b = store.get_mut(head.b);
    let mut bias = b.data.clone();
    bias.extend(std::iter::repeat_n(bias_init, k));
    *b = Tensor::new(vec![old_c + k], bias);
}

/// Learnable state of one continual-learning step.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Class id of each head column, in learning order.
    pub class_ids: Vec<u32>,
    pub step: usize,
    net: Net,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Backbone output `E(x)`, `[h'*w', N_c]`.
    pub backbone: Var,
    /// Shared features `F`, `[h'*w', N_c]`.
    pub features: Var,
    /// `[h*w, C_e]`.
    pub per_pixel: Var,
    /// `[N, C]`.
    pub class_logits: Var,
    /// `[N, h*w]`.
    pub mask_logits: Var,
    /// `[N, C_e]`.
    pub qm: Var,
    /// `[L, C_e]`, present when a caption prefix was given.
    pub qt: Option<Var>,
    /// `[L, V]`.
    pub caption_logits: Option<Var>,
}

/// Owned values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub per_pixel: Tensor,
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
    pub qm: Tensor,
    pub qt: Option<Tensor>,
    pub caption_logits: Option<Tensor>,
}

impl ForwardVars {
    pub fn values(&self, g: &Graph) -> ForwardOutput {
        ForwardOutput {
            features: g.value(self.features).clone(),
            per_pixel: g.value(self.per_pixel).clone(),
            class_logits: g.value(self.class_logits).clone(),
            mask_logits: g.value(self.mask_logits).clone(),
            qm: g.value(self.qm).clone(),
            qt: self.qt.map(|v| g.value(v).clone()),
            caption_logits: self.caption_logits.map(|v| g.value(v).clone()),
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn causal_mask(l: usize) -> Tensor {
    let mut m = vec![0.0; l * l];
    for i in 0..l {
        for j in i + 1..l {
            m[i * l + j] = NEG_INF;
        }
    }
    Tensor::new(vec![l, l], m)
}

impl Model {
    pub fn new(config: ModelConfig, class_ids: &[u32]) -> Result<Self> {
        config.validate()?;
        check_unique(class_ids)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let (nc, ce, d) = (config.feature_channels, config.embed_dim, config.hidden_dim);
        let r = &mut rng;
        let stem = Conv2d::new(&mut s, r, "enc.stem", CHANNELS + COORDS, STEM_CHANNELS, 3, 1, 1);
        let down1 = Conv2d::new(&mut s, r, "enc.down1", STEM_CHANNELS, DOWN_CHANNELS, 3, 2, 1);
        let down2 = Conv2d::new(&mut s, r, "enc.down2", DOWN_CHANNELS, nc, 3, 2, 1);
        let cce1 = Linear::new(&mut s, r, "enc.cce1", nc, nc);
        let cce2 = Linear::new(&mut s, r, "enc.cce2", nc, nc);
        let pix_feat = Linear::new(&mut s, r, "pix.feat", nc, PIXEL_HIDDEN);
        let pix_skip = Linear::new(&mut s, r, "pix.skip", STEM_CHANNELS, PIXEL_HIDDEN);
        let pix_out = Linear::new(&mut s, r, "pix.out", PIXEL_HIDDEN, ce);
        let low_out = Linear::new(&mut s, r, "pix.low", nc, ce);
        let hw_low = config.feature_size() * config.feature_size();
        let mem_proj = Linear::new(&mut s, r, "qdec.mem", nc, d);
        let mem_pos = init_embedding(&mut s, r, "qdec.mem_pos", hw_low, d);
        let queries = init_embedding(&mut s, r, "qdec.queries", config.num_queries, d);
        let query_layers = (0..config.mask_layers)
            .map(|i| {
                let n = format!("qdec.layer{i}");
                QueryLayer {
                    cross: Attention::new(&mut s, r, &format!("{n}.cross"), d, d),
                    ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), d),
                    self_attn: Attention::new(&mut s, r, &format!("{n}.self"), d, d),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), d),
                    ffn: FeedForward::new(&mut s, r, &format!("{n}.ffn"), d, 2 * d),
                    ln3: LayerNorm::new(&mut s, &format!("{n}.ln3"), d),
                }
            })
            .collect();
        let query_ln = LayerNorm::new(&mut s, "qdec.ln", d);
        let class_head = Linear::new(&mut s, r, "head.class", d, class_ids.len());
        let prior = logit(config.class_prior);
        s.get_mut(class_head.b).data.iter_mut().for_each(|b| *b = prior);
        let pool_head = Linear::new(&mut s, r, "head.pool", PIXEL_HIDDEN, class_ids.len());
        let pool_feat_head = Linear::new(&mut s, r, "head.pool_feat", nc, class_ids.len());
        for head in [pool_head, pool_feat_head] {
            s.get_mut(head.b).data.iter_mut().for_each(|b| *b = 0.0);
        }
        let mask_mlp = FeedForward::new(&mut s, r, "head.mask_mlp", d, d);
        let mask_out = Linear::new(&mut s, r, "head.mask_out", d, ce);
        let (v, dc) = (config.vocab_size, d);
        let tok_emb = init_embedding(&mut s, r, "cap.tok", v, dc);
        let pos_emb = init_embedding(&mut s, r, "cap.pos", config.max_caption_len, dc);
        let cap_mem = Linear::new(&mut s, r, "cap.mem", nc, dc);
        let cap_layers = (0..config.caption_layers)
            .map(|i| {
                let n = format!("cap.layer{i}");
                CaptionLayer {
                    self_attn: Attention::new(&mut s, r, &format!("{n}.self"), dc, dc),
                    ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), dc),
                    cross: Attention::new(&mut s, r, &format!("{n}.cross"), dc, dc),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), dc),
                    ffn: FeedForward::new(&mut s, r, &format!("{n}.ffn"), dc, 2 * dc),
                    ln3: LayerNorm::new(&mut s, &format!("{n}.ln3"), dc),
                }
            })
            .collect();
        let cap_ln = LayerNorm::new(&mut s, "cap.ln", dc);
        let cap_out = Linear::new(&mut s, r, "cap.out", dc, v);
        let text_proj = Linear::new(&mut s, r, "cap.text_proj", dc, ce);
        let net = Net {
            stem,
            down1,
            down2,
            cce1,
            cce2,
            pix_feat,
            pix_skip,
            pix_out,
            low_out,
            mem_proj,
            mem_pos,
            queries,
            query_layers,
            query_ln,
            class_head,
            pool_head,
            pool_feat_head,
            mask_mlp,
            mask_out,
            tok_emb,
            pos_emb,
            cap_mem,
            cap_layers,
            cap_ln,
            cap_out,
            text_proj,
        };
        Ok(Self { config, store: s, class_ids: class_ids.to_vec(), step: 0, net })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Head column of each class id.
    pub fn class_columns(&self) -> HashMap<u32, usize> {
        self.class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }

    /// Appends head columns for `new_ids`; old columns are left untouched.
    pub fn extend_classes(&mut self, new_ids: &[u32]) -> Result<()> {
        let existing: BTreeSet<u32> = self.class_ids.iter().copied().collect();
        if let Some(c) = new_ids.iter().find(|c| existing.contains(c)) {
            return Err(Error::Invalid(format!("class {c} already has a head column")));
        }
        check_unique(new_ids)?;
        if new_ids.is_empty() {
            return Ok(());
        }
        let prior = logit(self.config.class_prior);
        for (head, bias_init) in [(self.net.class_head, prior), (self.net.pool_head, 0.0), (self.net.pool_feat_head, 0.0)] {
            widen_columns(&mut self.store, head, new_ids.len(), bias_init);
        }
        self.class_ids.extend_from_slice(new_ids);
        Ok(())
    }

    /// Channels-last image plus normalized coordinates, `[h*w, 5]`.
    pub fn image_input(&self, image: &[f32]) -> Result<Tensor> {
        let s = self.config.image_size;
        if image.len() != CHANNELS * s * s {
            return Err(Error::Shape(format!(
                "image has {} values, expected {CHANNELS}x{s}x{s}",
                image.len()
            )));
        }
        let c = CHANNELS + COORDS;
        let mut out = vec![0.0; s * s * c];
        let scale = 2.0 / (s - 1) as f64;
        for y in 0..s {
            for x in 0..s {
                let p = y * s + x;
                for ch in 0..CHANNELS {
                    out[p * c + ch] = f64::from(image[ch * s * s + p]);
                }
                out[p * c + CHANNELS] = x as f64 * scale - 1.0;
                out[p * c + CHANNELS + 1] = y as f64 * scale - 1.0;
            }
        }
        Ok(Tensor::new(vec![s * s, c], out))
    }

    /// Returns `(stem, E(x), F)` with `F = Θ2(relu(Θ1(E))) + E`.
    fn encode_graph(&self, g: &mut Graph, p: &mut Bound, image: &[f32]) -> Result<(Var, Var, Var)> {
        let s = self.config.image_size;
        let x = g.constant(self.image_input(image)?);
        let (h, _, _) = self.net.stem.forward(g, p, x, s, s);
        let stem = g.relu(h);
        let (h, h1, w1) = self.net.down1.forward(g, p, stem, s, s);
        let h = g.relu(h);
        let (h, _, _) = self.net.down2.forward(g, p, h, h1, w1);
        let e = g.relu(h);
        let f = self.cce_branch(g, p, e);
        let f = g.add(f, e);
        Ok((stem, e, f))
    }

    fn cce_branch(&self, g: &mut Graph, p: &mut Bound, e: Var) -> Var {
        let b = self.net.cce1.forward(g, p, e);
        let b = g.relu(b);
        self.net.cce2.forward(g, p, b)
    }

    /// `(E(x), F)` for one image.
    pub fn encode(&self, image: &[f32]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut p = Bound::frozen(&self.store);
        let (_, e, f) = self.encode_graph(&mut g, &mut p, image)?;
        Ok((g.value(e).clone(), g.value(f).clone()))
    }

    /// The residual branch `Θ2(relu(Θ1(x)))` alone.
    pub fn cce_branch_values(&self, e: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut p = Bound::frozen(&self.store);
        let e = g.constant(e.clone());
        let b = self.cce_branch(&mut g, &mut p, e);
        g.value(b).clone()
    }

    fn mask_embed(&self, g: &mut Graph, p: &mut Bound, x: Var) -> Var {
        let h = self.net.query_ln.forward(g, p, x);
        let h = self.net.mask_mlp.forward(g, p, h);
        let h = g.relu(h);
        self.net.mask_out.forward(g, p, h)
    }

    /// Additive attention mask keeping the predicted foreground of each query.
    fn foreground_mask(&self, g: &mut Graph, p: &mut Bound, x: Var, low: Var) -> Tensor {
        let q = self.mask_embed(g, p, x);
        let m = g.matmul_t(q, false, low, true);
        let v = g.value(m);
        let (n, hw) = (v.rows(), v.cols());
        let mut out = vec![0.0; n * hw];
        for r in 0..n {
            let row = &v.data[r * hw..(r + 1) * hw];
            if row.iter().any(|&z| sigmoid_scalar(z) >= 0.5) {
                for (o, &z) in out[r * hw..(r + 1) * hw].iter_mut().zip(row) {
                    if sigmoid_scalar(z) < 0.5 {
                        *o = NEG_INF;
                    }
                }
            }
        }
        Tensor::new(vec![n, hw], out)
    }

    fn decode_queries(&self, g: &mut Graph, p: &mut Bound, f: Var) -> Var {
        let mem = self.net.mem_proj.forward(g, p, f);
        let pos = p.p(g, self.net.mem_pos);
        let mem = g.add(mem, pos);
        let low = match self.config.variant {
            Variant::CppPlus => Some(self.net.low_out.forward(g, p, f)),
            Variant::Cpp => None,
        };
        let mut x = p.p(g, self.net.queries);
        for layer in &self.net.query_layers {
            let mask = low.map(|low| self.foreground_mask(g, p, x, low));
            let a = layer.cross.forward(g, p, x, mem, mask);
            let h = g.add(x, a);
            let h = layer.ln1.forward(g, p, h);
            let a = layer.self_attn.forward(g, p, h, h, None);
            let h2 = g.add(h, a);
            let h2 = layer.ln2.forward(g, p, h2);
            let a = layer.ffn.forward(g, p, h2);
            let h3 = g.add(h2, a);
            x = layer.ln3.forward(g, p, h3);
        }
        x
    }

    /// Returns `(hidden, per_pixel)`.
    fn pixel_decoder(&self, g: &mut Graph, p: &mut Bound, stem: Var, f: Var) -> (Var, Var) {
        let fs = self.config.feature_size();
        let a = self.net.pix_feat.forward(g, p, f);
        let a = g.upsample_nearest(a, fs, fs, STRIDE);
        let b = self.net.pix_skip.forward(g, p, stem);
        let h = g.add(a, b);
        let h = g.relu(h);
        (h, self.net.pix_out.forward(g, p, h))
    }

    /// Class logits from the query state plus features pooled under each
    /// query's (detached) soft mask.
    fn classify(&self, g: &mut Graph, p: &mut Bound, x: Var, mask_logits: Var, hidden: Var, features: Var) -> Var {
        let h = self.net.query_ln.forward(g, p, x);
        let direct = self.net.class_head.forward(g, p, h);
        let m = g.value(mask_logits);
        let (n, hw) = (m.rows(), m.cols());
        let mut w = vec![0.0; n * hw];
        for r in 0..n {
            let row = &mut w[r * hw..(r + 1) * hw];
            row.iter_mut().zip(m.row(r)).filter(|(_, &z)| z >= 0.0).for_each(|(o, &z)| *o = sigmoid_scalar(z));
            let total: f64 = row.iter().sum::<f64>().max(1.0);
            row.iter_mut().for_each(|o| *o /= total);
        }
        let (fs, size) = (self.config.feature_size(), self.config.image_size);
        let mut w_low = vec![0.0; n * fs * fs];
        for r in 0..n {
            for px in 0..hw {
                let (y, x) = (px / size / STRIDE, px % size / STRIDE);
                w_low[r * fs * fs + y * fs + x] += w[r * hw + px];
            }
        }
        let w = g.constant(Tensor::new(vec![n, hw], w));
        let pooled = g.matmul_t(w, false, hidden, false);
        let pooled = self.net.pool_head.forward(g, p, pooled);
        let w_low = g.constant(Tensor::new(vec![n, fs * fs], w_low));
        let pooled_f = g.matmul_t(w_low, false, features, false);
        let pooled_f = self.net.pool_feat_head.forward(g, p, pooled_f);
        let s = g.add(direct, pooled);
        g.add(s, pooled_f)
    }

    /// Caption decoder over a token prefix; returns `(logits, hidden)`.
    fn decode_caption(&self, g: &mut Graph, p: &mut Bound, cap_mem: Var, tokens: &[u32]) -> Result<(Var, Var)> {
        let l = tokens.len();
        if l == 0 || l > self.config.max_caption_len {
            return Err(Error::Caption(format!("caption input of {l} tokens, limit {}", self.config.max_caption_len)));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Caption(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        let tok = p.p(g, self.net.tok_emb);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = g.gather_rows(tok, &idx);
        let pos = p.p(g, self.net.pos_emb);
        let pos = g.gather_rows(pos, &(0..l).collect::<Vec<_>>());
        let mut x = g.add(x, pos);
        for layer in &self.net.cap_layers {
            let a = layer.self_attn.forward(g, p, x, x, Some(causal_mask(l)));
            let h = g.add(x, a);
            let h = layer.ln1.forward(g, p, h);
            let a = layer.cross.forward(g, p, h, cap_mem, None);
            let h2 = g.add(h, a);
            let h2 = layer.ln2.forward(g, p, h2);
            let a = layer.ffn.forward(g, p, h2);
            let h3 = g.add(h2, a);
            x = layer.ln3.forward(g, p, h3);
        }
        let hidden = self.net.cap_ln.forward(g, p, x);
        let logits = self.net.cap_out.forward(g, p, hidden);
        Ok((logits, hidden))
    }

    /// Full forward pass on `g`. With `caption`, the caption decoder runs
    /// teacher-forced on that prefix.
    pub fn forward_graph(&self, g: &mut Graph, p: &mut Bound, image: &[f32], caption: Option<&[u32]>) -> Result<ForwardVars> {
        if self.store.get(self.net.class_head.w).cols() != self.class_ids.len() {
            return Err(Error::Shape("class head width differs from the class count".into()));
        }
        let (stem, backbone, features) = self.encode_graph(g, p, image)?;
        let (hidden, per_pixel) = self.pixel_decoder(g, p, stem, features);
        let x = self.decode_queries(g, p, features);
        let qm = self.mask_embed(g, p, x);
        let mask_logits = g.matmul_t(qm, false, per_pixel, true);
        let class_logits = self.classify(g, p, x, mask_logits, hidden, features);
        let (qt, caption_logits) = match caption {
            Some(toks) => {
                let mem = self.net.cap_mem.forward(g, p, features);
                let (logits, hidden) = self.decode_caption(g, p, mem, toks)?;
                (Some(self.net.text_proj.forward(g, p, hidden)), Some(logits))
            }
            None => (None, None),
        };
        Ok(ForwardVars { backbone, features, per_pixel, class_logits, mask_logits, qm, qt, caption_logits })
    }

    /// Inference forward with frozen weights.
    pub fn forward(&self, image: &[f32], caption: Option<&[u32]>) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let mut p = Bound::frozen(&self.store);
        let v = self.forward_graph(&mut g, &mut p, image, caption)?;
        Ok(v.values(&g))
    }

    /// Runs the mask decoder of `self` on externally supplied features `F`.
    pub fn decode_masks_from_features(&self, features: &Tensor, per_pixel: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut p = Bound::frozen(&self.store);
        let f = g.constant(features.clone());
        let x = self.decode_queries(&mut g, &mut p, f);
        let qm = self.mask_embed(&mut g, &mut p, x);
        let pp = g.constant(per_pixel.clone());
        let m = g.matmul_t(qm, false, pp, true);
        g.value(m).clone()
    }

    /// Log-probability of `tokens[1..]` given the image.
    pub fn sequence_logprob(&self, image: &[f32], tokens: &[u32]) -> Result<f64> {
        let out = self.forward(image, Some(&tokens[..tokens.len() - 1]))?;
        let logits = out.caption_logits.expect("caption logits requested");
        Ok((1..tokens.len()).map(|i| log_softmax_row(logits.row(i - 1))[tokens[i] as usize]).sum())
    }

    /// Decodes a caption starting with `start`. `beam == 1` is greedy argmax.
    /// Returns the sequence and its log-probability.
    pub fn generate_caption(&self, image: &[f32], start: u32, end: u32, max_len: usize, beam: usize) -> Result<(Vec<u32>, f64)> {
        if beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        let max_len = max_len.clamp(1, self.config.max_caption_len);
        let mut g = Graph::new();
        let mut p = Bound::frozen(&self.store);
        let (_, _, f) = self.encode_graph(&mut g, &mut p, image)?;
        let mem = self.net.cap_mem.forward(&mut g, &mut p, f);
        let mut next = |prefix: &[u32]| -> Result<Vec<f64>> {
            let mark = g.len();
            // Fresh bindings: anything bound after `mark` is discarded below.
            let mut p = Bound::frozen(&self.store);
            let (logits, _) = self.decode_caption(&mut g, &mut p, mem, prefix)?;
            let row = log_softmax_row(g.value(logits).row(prefix.len() - 1));
            g.truncate(mark);
            Ok(row)
        };
        let greedy = {
            let (mut seq, mut score) = (vec![start], 0.0);
            while seq.len() < max_len && *seq.last().unwrap() != end {
                let lp = next(&seq)?;
                let (tok, v) = argmax(&lp);
                seq.push(tok as u32);
                score += v;
            }
            (seq, score)
        };
        if beam == 1 {
            return Ok(greedy);
        }
        let mut beams = vec![(vec![start], 0.0)];
        loop {
            let mut cand: Vec<(Vec<u32>, f64)> = Vec::new();
            let mut expanded = false;
            for (seq, score) in &beams {
                if seq.len() >= max_len || *seq.last().unwrap() == end {
                    cand.push((seq.clone(), *score));
                    continue;
                }
                expanded = true;
                let lp = next(seq)?;
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &tok in order.iter().take(beam) {
                    let mut s = seq.clone();
                    s.push(tok as u32);
                    cand.push((s, score + lp[tok]));
                }
            }
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            cand.truncate(beam);
            beams = cand;
            if !expanded {
                break;
            }
        }
        // The greedy path competes too, so a wider beam never scores worse.
        let best = beams.into_iter().chain(std::iter::once(greedy)).max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        Ok(best.expect("at least one hypothesis"))
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA,
            config: self.config.clone(),
            step: self.step,
            class_ids: self.class_ids.clone(),
            meta: meta.clone(),
        };
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.shape.clone(), t.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, shape, b)| {
                TensorView::new(Dtype::F64, shape.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let header = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info = HashMap::from([("header".to_string(), header)]);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(views, Some(info), path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Loads a checkpoint; with `expected`, a differing config is an error.
    pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Self, CheckpointHeader)> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let st = SafeTensors::deserialize(&buf).map_err(|e| bad(e.to_string()))?;
        let (_, meta) = SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
        let header = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("header"))
            .ok_or_else(|| bad("missing header".into()))?;
        let header: CheckpointHeader = serde_json::from_str(header).map_err(|e| bad(e.to_string()))?;
        if header.schema_version != CHECKPOINT_SCHEMA {
            return Err(bad(format!("unsupported schema version {}", header.schema_version)));
        }
        if let Some(cfg) = expected {
            if *cfg != header.config {
                return Err(bad("model config differs from the expected config".into()));
            }
        }
        let mut model = Model::new(header.config.clone(), &header.class_ids)?;
        model.step = header.step;
        let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        if st.len() != names.len() {
            return Err(bad(format!("{} tensors, model expects {}", st.len(), names.len())));
        }
        for name in names {
            let view = st.tensor(&name).map_err(|_| bad(format!("missing tensor {name}")))?;
            let id = model.store.id(&name).expect("name from store");
            let t = model.store.get_mut(id);
            if view.dtype() != Dtype::F64 || view.shape() != t.shape.as_slice() {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", view.shape(), t.shape)));
            }
            for (dst, chunk) in t.data.iter_mut().zip(view.data().chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok((model, header))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub step: usize,
    pub class_ids: Vec<u32>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn check_unique(ids: &[u32]) -> Result<()> {
    let set: BTreeSet<u32> = ids.iter().copied().collect();
    if set.len() != ids.len() {
        return Err(Error::Invalid("duplicate class ids".into()));
    }
    if set.contains(&crate::synthdata::BACKGROUND) {
        return Err(Error::Invalid("class id 0 is reserved for background".into()));
    }
    Ok(())
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig { image_size: 16, feature_channels: 8, embed_dim: 6, hidden_dim: 8, num_queries: 5, vocab_size: 12, max_caption_len: 8, variant, ..Default::default() }
    }

    fn image(size: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * size * size).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn feature_shape_follows_stride() {
        let cfg = ModelConfig { feature_channels: 128, ..Default::default() };
        let m = Model::new(cfg, &[1, 2]).unwrap();
        let (e, f) = m.encode(&image(64, 1)).unwrap();
        assert_eq!(f.shape, vec![16 * 16, 128]);
        assert_eq!(e.shape, f.shape);
        assert!(m.encode(&image(32, 1)).is_err());
    }

    #[test]
    fn residual_branch_recomputes() {
        let m = Model::new(small(Variant::Cpp), &[1]).unwrap();
        let (e, f) = m.encode(&image(16, 2)).unwrap();
        let branch = m.cce_branch_values(&e);
        for k in 0..f.len() {
            assert!((f.data[k] - e.data[k] - branch.data[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_backbone_gives_zero_features() {
        let mut m = Model::new(small(Variant::Cpp), &[1]).unwrap();
        for name in ["enc.cce1.bias", "enc.cce2.bias", "enc.down2.weight", "enc.down2.bias"] {
            let id = m.store.id(name).unwrap();
            m.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let (e, f) = m.encode(&image(16, 3)).unwrap();
        assert!(e.data.iter().chain(&f.data).all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_for_both_variants() {
        for variant in [Variant::Cpp, Variant::CppPlus] {
            let cfg = ModelConfig { num_queries: 20, vocab_size: 64, max_caption_len: 16, ..small(variant) };
            let ids: Vec<u32> = (1..=10).collect();
            let m = Model::new(cfg, &ids).unwrap();
            let caption: Vec<u32> = (0..16).map(|i| i % 64).collect();
            let o = m.forward(&image(16, 4), Some(&caption)).unwrap();
            assert_eq!(o.class_logits.shape, vec![20, 10]);
            assert_eq!(o.mask_logits.shape, vec![20, 256]);
            assert_eq!(o.qm.shape, vec![20, 6]);
            assert_eq!(o.per_pixel.shape, vec![256, 6]);
            assert_eq!(o.qt.as_ref().unwrap().shape, vec![16, 6]);
            assert_eq!(o.caption_logits.as_ref().unwrap().shape, vec![16, 64]);
            assert_eq!(o, m.forward(&image(16, 4), Some(&caption)).unwrap());
        }
    }

    #[test]
    fn mask_logits_are_per_pixel_dot_products() {
        let cfg = ModelConfig { image_size: 8, ..small(Variant::Cpp) };
        let m = Model::new(cfg, &[1, 2]).unwrap();
        let o = m.forward(&image(8, 5), None).unwrap();
        let (n, hw, ce) = (o.qm.rows(), o.per_pixel.rows(), o.qm.cols());
        for q in 0..n {
            for px in 0..hw {
                let mut dot = 0.0;
                for c in 0..ce {
                    dot += o.qm.data[q * ce + c] * o.per_pixel.data[px * ce + c];
                }
                assert!((dot - o.mask_logits.data[q * hw + px]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extension_preserves_old_logits() {
        let mut m = Model::new(small(Variant::CppPlus), &[3, 1]).unwrap();
        let img = image(16, 6);
        let before = m.forward(&img, None).unwrap();
        m.extend_classes(&[]).unwrap();
        assert_eq!(m.forward(&img, None).unwrap(), before);
        m.extend_classes(&[4, 5, 6, 7, 8]).unwrap();
        let after = m.forward(&img, None).unwrap();
        assert_eq!(after.class_logits.cols(), 7);
        for q in 0..5 {
            assert_eq!(&after.class_logits.row(q)[..2], before.class_logits.row(q));
            for &v in &after.class_logits.row(q)[2..] {
                assert!((sigmoid_scalar(v) - 0.01).abs() < 1e-12);
            }
        }
        assert!(m.extend_classes(&[1]).is_err());
        assert!(m.extend_classes(&[9, 9]).is_err());
    }

    #[test]
    fn greedy_matches_stepwise_argmax_and_beam_dominates() {
        let m = Model::new(small(Variant::Cpp), &[1]).unwrap();
        let img = image(16, 7);
        let (greedy, score) = m.generate_caption(&img, 0, 1, 8, 1).unwrap();
        assert_eq!(greedy[0], 0);
        assert!(greedy.len() <= 8);
        let mut seq = vec![0u32];
        while seq.len() < 8 && *seq.last().unwrap() != 1 {
            let o = m.forward(&img, Some(&seq)).unwrap();
            let row = o.caption_logits.unwrap().row(seq.len() - 1).to_vec();
            seq.push(argmax(&row).0 as u32);
        }
        assert_eq!(greedy, seq);
        assert!((m.sequence_logprob(&img, &greedy).unwrap() - score).abs() < 1e-9);
        let (b5, s5) = m.generate_caption(&img, 0, 1, 8, 5).unwrap();
        assert!(s5 >= score);
        assert!((m.sequence_logprob(&img, &b5).unwrap() - s5).abs() < 1e-9);
        assert!(m.generate_caption(&img, 0, 1, 8, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step_0/checkpoint");
        let mut m = Model::new(small(Variant::Cpp), &[2, 4]).unwrap();
        m.extend_classes(&[7]).unwrap();
        m.step = 1;
        let meta = BTreeMap::from([("note".to_string(), serde_json::json!("x"))]);
        m.save_checkpoint(&path, &meta).unwrap();
        let (back, header) = Model::load_checkpoint(&path, Some(&m.config)).unwrap();
        assert_eq!(header.class_ids, vec![2, 4, 7]);
        assert_eq!(header.meta, meta);
        assert_eq!(back.step, 1);
        let img = image(16, 8);
        assert_eq!(back.forward(&img, None).unwrap(), m.forward(&img, None).unwrap());
        let other = ModelConfig { num_queries: 6, ..m.config.clone() };
        assert!(matches!(Model::load_checkpoint(&path, Some(&other)), Err(Error::Checkpoint(_))));
        assert!(Model::load_checkpoint(&dir.path().join("nope"), None).is_err());
    }
}
