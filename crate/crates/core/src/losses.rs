//! Training objectives: base task losses, distillation, cross-modal consistency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_with_logits_scalar, sigmoid_scalar, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::matching::{Assignment, FOCAL_ALPHA, FOCAL_GAMMA};

pub const DICE_EPS: f64 = 1e-6;
/// Teacher queries below this max class probability are not distilled.
pub const CID_GATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Caption weight λ.
    pub lambda: f64,
    pub eta_focal: f64,
    pub eta_dice: f64,
    /// CID exponent between class confidence and mask IoU.
    pub gamma: f64,
    pub tau_i2t: f64,
    pub tau_t2i: f64,
    pub icd: bool,
    pub cid: bool,
    pub cbc: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.0, eta_focal: 20.0, eta_dice: 1.0, gamma: 0.5, tau_i2t: 10.0, tau_t2i: 10.0, icd: true, cid: true, cbc: false }
    }
}

impl LossWeights {
    /// Alternative reading where 20 and 1 are the consistency temperatures.
    pub fn temperature_reading() -> Self {
        Self { tau_i2t: 20.0, tau_t2i: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda, self.eta_focal, self.eta_dice, self.tau_i2t, self.tau_t2i];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Per-class sigmoid BCE summed over classes, averaged over queries.
/// Matched queries target their class column, unmatched queries all zeros.
pub fn loss_cls(g: &mut Graph, class_logits: Var, assignment: &Assignment, gt_cols: &[usize]) -> Var {
    let (n, c) = (g.value(class_logits).rows(), g.value(class_logits).cols());
    let mut targets = vec![0.0; n * c];
    for &(q, gi) in &assignment.pairs {
        targets[q * c + gt_cols[gi]] = 1.0;
    }
    let l = g.bce_with_logits(class_logits, &targets);
    let s = g.sum(l);
    g.scale(s, 1.0 / n.max(1) as f64)
}

/// Mean sigmoid focal loss over pixels.
pub fn loss_focal(g: &mut Graph, logits: Var, gt: &[f64]) -> Var {
    let l = g.sigmoid_focal(logits, gt, FOCAL_ALPHA, FOCAL_GAMMA);
    g.mean(l)
}

pub fn loss_dice(g: &mut Graph, logits: Var, gt: &[f64]) -> Var {
    let shape = g.shape(logits).to_vec();
    let p = g.sigmoid(logits);
    let gt_t = g.constant(Tensor::new(shape, gt.to_vec()));
    let pg = g.mul(p, gt_t);
    let inter = g.sum(pg);
    let num = g.scale(inter, 2.0);
    let sp = g.sum(p);
    let den = g.add_scalar(sp, gt.iter().sum::<f64>() + DICE_EPS);
    let r = g.div(num, den);
    let neg = g.scale(r, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Σ over matched pairs of `η_focal·focal + η_dice·dice`.
pub fn loss_seg(g: &mut Graph, mask_logits: Var, assignment: &Assignment, gt_masks: &[Vec<f64>], w: &LossWeights) -> Var {
    let mut total = g.constant(Tensor::scalar(0.0));
    for &(q, gi) in &assignment.pairs {
        let row = g.gather_rows(mask_logits, &[q]);
        let f = loss_focal(g, row, &gt_masks[gi]);
        let d = loss_dice(g, row, &gt_masks[gi]);
        let f = g.scale(f, w.eta_focal);
        let d = g.scale(d, w.eta_dice);
        let m = g.add(f, d);
        total = g.add(total, m);
    }
    total
}

/// Teacher-forced caption NLL: logit row `i` predicts `tokens[i + 1]`,
/// summed through the first END.
pub fn loss_cap(g: &mut Graph, caption_logits: Var, tokens: &[u32], end: u32) -> Result<Var> {
    let end_pos = tokens
        .iter()
        .skip(1)
        .position(|&t| t == end)
        .map(|p| p + 1)
        .ok_or_else(|| Error::Caption("target caption lacks END".into()))?;
    let (rows, v) = (g.value(caption_logits).rows(), g.value(caption_logits).cols());
    if rows < end_pos {
        return Err(Error::Shape(format!("{rows} caption logit rows cannot cover {end_pos} targets")));
    }
    if let Some(&bad) = tokens[1..=end_pos].iter().find(|&&t| t as usize >= v) {
        return Err(Error::Caption(format!("token {bad} outside vocabulary of {v}")));
    }
    let ls = g.log_softmax_rows(caption_logits);
    let idx: Vec<usize> = (0..end_pos).map(|i| i * v + tokens[i + 1] as usize).collect();
    let picked = g.gather_elements(ls, &idx);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

/// Row-wise cosine similarities; zero rows give 0.
pub fn row_cosines(g: &mut Graph, a: Var, b: Var) -> Var {
    let na = g.normalize_rows(a);
    let nb = g.normalize_rows(b);
    let p = g.mul(na, nb);
    g.sum_cols(p)
}

/// Mean over rows of `1 - cos(a_r, b_r)`.
pub fn embedding_distance(g: &mut Graph, a: Var, b: Var) -> Var {
    let c = row_cosines(g, a, b);
    let m = g.mean(c);
    let neg = g.scale(m, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Per-class mean of the rows of `q` listed in `groups`, each as `[1, d]`.
pub fn class_embeddings(g: &mut Graph, q: Var, groups: &BTreeMap<u32, Vec<usize>>) -> BTreeMap<u32, Var> {
    let d = g.value(q).cols();
    groups
        .iter()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(&c, rows)| {
            let sel = g.gather_rows(q, rows);
            let s = g.sum_rows(sel);
            let m = g.scale(s, 1.0 / rows.len() as f64);
            (c, g.reshape(m, vec![1, d]))
        })
        .collect()
}

/// Embedding and class-contrastive distillation.
///
/// `anchors` are teacher class embeddings for old classes, `student` the
/// student class embeddings of every class present; `num_seen` is `|C^{0:t}|`.
#[allow(clippy::too_many_arguments)]
pub fn loss_icd(
    g: &mut Graph,
    teacher_qm: Var,
    student_qm: Var,
    teacher_qt: Var,
    student_qt: Var,
    anchors: &BTreeMap<u32, Var>,
    student: &BTreeMap<u32, Var>,
    num_seen: usize,
) -> Var {
    let tqm = g.detach(teacher_qm);
    let tqt = g.detach(teacher_qt);
    let dm = embedding_distance(g, tqm, student_qm);
    let dt = embedding_distance(g, tqt, student_qt);
    let mut total = g.add(dm, dt);
    let mut pairs = Vec::new();
    for (k, &fk) in anchors {
        let Some(&fi) = student.get(k) else { continue };
        let fk = g.detach(fk);
        let pos = embedding_distance(g, fk, fi);
        for (j, &fj) in student {
            if j == k {
                continue;
            }
            let neg = embedding_distance(g, fk, fj);
            pairs.push(g.sub(pos, neg));
        }
    }
    if !pairs.is_empty() && num_seen > 0 {
        let stacked = g.concat_rows(&pairs);
        let s = g.sum(stacked);
        let dcl = g.scale(s, 1.0 / num_seen as f64);
        total = g.add(total, dcl);
    }
    total
}

/// `c^γ · IoU^(1-γ)`, with `0^0 = 1`.
pub fn cid_quality(c: f64, iou: f64, gamma: f64) -> f64 {
    c.powf(gamma) * iou.powf(1.0 - gamma)
}

/// Quality-weighted alignment of student class outputs to the teacher's.
///
/// Each gated query contributes `q_r · Σ_c KL(Bern(p_T) ‖ Bern(p_S))`.
pub fn loss_cid(g: &mut Graph, teacher_logits: &Tensor, student_logits: Var, quality: &[f64]) -> Result<Var> {
    let (n, c_old) = (teacher_logits.rows(), teacher_logits.cols());
    let (sn, sc) = (g.value(student_logits).rows(), g.value(student_logits).cols());
    if sn != n || sc < c_old || quality.len() != n {
        return Err(Error::Shape(format!(
            "teacher [{n}, {c_old}] / student [{sn}, {sc}] / {} qualities",
            quality.len()
        )));
    }
    let rows: Vec<usize> = (0..n)
        .filter(|&r| {
            let best = teacher_logits.row(r).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            quality[r] > 0.0 && sigmoid_scalar(best) >= CID_GATE
        })
        .collect();
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let sel = g.gather_rows(student_logits, &rows);
    let old = g.slice_cols(sel, 0, c_old);
    let mut targets = Vec::with_capacity(rows.len() * c_old);
    let mut entropy = Vec::with_capacity(rows.len());
    for &r in &rows {
        let mut h = 0.0;
        for &x in teacher_logits.row(r) {
            targets.push(sigmoid_scalar(x));
            h += bce_with_logits_scalar(x, sigmoid_scalar(x));
        }
        entropy.push(h);
    }
    let bce = g.bce_with_logits(old, &targets);
    let per_query = g.sum_cols(bce);
    let h = g.constant(Tensor::new(vec![rows.len()], entropy));
    let kl = g.sub(per_query, h);
    let q = g.constant(Tensor::new(vec![rows.len()], rows.iter().map(|&r| quality[r]).collect()));
    let w = g.mul(kl, q);
    Ok(g.sum(w))
}

/// Bidirectional attention-pooled cosine consistency between mask and text embeddings.
pub fn loss_cbc(g: &mut Graph, qm: Var, qt: Var, tau_i2t: f64, tau_t2i: f64) -> Var {
    let nm = g.normalize_rows(qm);
    let nt = g.normalize_rows(qt);
    let s = g.matmul_t(nm, false, nt, true);
    let s1 = g.scale(s, tau_i2t);
    let a1 = g.softmax_rows(s1);
    let pooled_m = g.matmul(a1, nt);
    let d_i2t = embedding_distance(g, qm, pooled_m);
    let st = g.transpose(s);
    let s2 = g.scale(st, tau_t2i);
    let a2 = g.softmax_rows(s2);
    let pooled_t = g.matmul(a2, nm);
    let d_t2i = embedding_distance(g, qt, pooled_t);
    g.add(d_i2t, d_t2i)
}

/// Individually computed terms; absent ones are disabled.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub seg: Var,
    pub cap: Var,
    pub icd: Option<Var>,
    pub cid: Option<Var>,
    pub cbc: Option<Var>,
}

/// `cls + seg + λ·cap`, plus the enabled consistency/distillation terms.
/// Distillation only contributes at incremental steps.
pub fn loss_total(g: &mut Graph, parts: &LossParts, w: &LossWeights, is_cl_step: bool) -> Var {
    let cap = g.scale(parts.cap, w.lambda);
    let base = g.add(parts.cls, parts.seg);
    let mut total = g.add(base, cap);
    if is_cl_step {
        for (on, term) in [(w.icd, parts.icd), (w.cid, parts.cid)] {
            if let (true, Some(v)) = (on, term) {
                total = g.add(total, v);
            }
        }
    }
    if let (true, Some(v)) = (w.cbc, parts.cbc) {
        total = g.add(total, v);
    }
    total
}
