//! Panoptic quality, mean IoU, BLEU, and query-output rendering.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar, Tensor};
use crate::error::{Error, Result};
use crate::matching::iou;
use crate::synthdata::{ClassKind, Taxonomy, BACKGROUND};

pub const MATCH_IOU: f64 = 0.5;
pub const EVAL_SCHEMA: u32 = 1;

/// A predicted or ground-truth segment of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PanSegment {
    pub class_id: u32,
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassCounts {
    fn denom(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    pub fn pq(&self) -> f64 {
        let d = self.denom();
        if d == 0.0 { 0.0 } else { self.iou_sum / d }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 }
    }

    pub fn rq(&self) -> f64 {
        let d = self.denom();
        if d == 0.0 { 0.0 } else { self.tp as f64 / d }
    }

    fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

/// Per-class PQ counts, summed over images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqAccumulator {
    pub per_class: BTreeMap<u32, ClassCounts>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Classes averaged.
    pub n: usize,
}

fn check_disjoint(segs: &[PanSegment], side: &str) -> Result<()> {
    let Some(first) = segs.first() else { return Ok(()) };
    let mut seen = vec![false; first.mask.len()];
    for s in segs {
        if s.mask.len() != seen.len() {
            return Err(Error::Shape(format!("{side} masks differ in size")));
        }
        for (k, &m) in s.mask.iter().enumerate() {
            if m {
                if seen[k] {
                    return Err(Error::Invalid(format!("{side} segments overlap at pixel {k}")));
                }
                seen[k] = true;
            }
        }
    }
    Ok(())
}

impl PqAccumulator {
    /// Adds one image; a pair matches iff same class and IoU > 0.5.
    pub fn add_image(&mut self, pred: &[PanSegment], gt: &[PanSegment]) -> Result<()> {
        check_disjoint(pred, "predicted")?;
        check_disjoint(gt, "ground-truth")?;
        let mut pred_used = vec![false; pred.len()];
        for g in gt {
            let entry = self.per_class.entry(g.class_id).or_default();
            let mut hit = None;
            for (pi, p) in pred.iter().enumerate() {
                if p.class_id == g.class_id && !pred_used[pi] {
                    let v = iou(&p.mask, &g.mask)?;
                    if v > MATCH_IOU {
                        hit = Some((pi, v));
                        break;
                    }
                }
            }
            match hit {
                Some((pi, v)) => {
                    pred_used[pi] = true;
                    entry.tp += 1;
                    entry.iou_sum += v;
                }
                None => entry.fn_ += 1,
            }
        }
        for (p, used) in pred.iter().zip(pred_used) {
            if !used {
                self.per_class.entry(p.class_id).or_default().fp += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (c, o) in &other.per_class {
            let e = self.per_class.entry(*c).or_default();
            e.tp += o.tp;
            e.fp += o.fp;
            e.fn_ += o.fn_;
            e.iou_sum += o.iou_sum;
        }
    }

    /// Mean over present classes, optionally restricted to `subset`.
    pub fn aggregate(&self, subset: Option<&BTreeSet<u32>>) -> Aggregate {
        let rows: Vec<&ClassCounts> = self
            .per_class
            .iter()
            .filter(|(c, k)| k.present() && subset.is_none_or(|s| s.contains(c)))
            .map(|(_, k)| k)
            .collect();
        if rows.is_empty() {
            return Aggregate::default();
        }
        let n = rows.len() as f64;
        Aggregate {
            pq: rows.iter().map(|k| k.pq()).sum::<f64>() / n,
            sq: rows.iter().map(|k| k.sq()).sum::<f64>() / n,
            rq: rows.iter().map(|k| k.rq()).sum::<f64>() / n,
            n: rows.len(),
        }
    }
}

/// Single-image panoptic quality.
pub fn panoptic_quality(pred: &[PanSegment], gt: &[PanSegment]) -> Result<PqAccumulator> {
    let mut acc = PqAccumulator::default();
    acc.add_image(pred, gt)?;
    Ok(acc)
}

/// Pixel confusion counts per class, summed over images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    /// `class -> (tp, fp, fn)`.
    pub per_class: BTreeMap<u32, (u64, u64, u64)>,
}

impl IouAccumulator {
    pub fn add_image(&mut self, pred: &[u32], gt: &[u32], class_ids: &BTreeSet<u32>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                if class_ids.contains(&p) {
                    self.per_class.entry(p).or_default().0 += 1;
                }
                continue;
            }
            if class_ids.contains(&p) {
                self.per_class.entry(p).or_default().1 += 1;
            }
            if class_ids.contains(&g) {
                self.per_class.entry(g).or_default().2 += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (c, o) in &other.per_class {
            let e = self.per_class.entry(*c).or_default();
            e.0 += o.0;
            e.1 += o.1;
            e.2 += o.2;
        }
    }

    pub fn mean(&self) -> f64 {
        let ious: Vec<f64> = self
            .per_class
            .values()
            .filter(|(tp, fp, fn_)| tp + fp + fn_ > 0)
            .map(|&(tp, fp, fn_)| tp as f64 / (tp + fp + fn_) as f64)
            .collect();
        if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 }
    }
}

/// Per-class pixel IoU averaged over `class_ids` present in either map.
pub fn mean_iou(pred: &[u32], gt: &[u32], class_ids: &BTreeSet<u32>) -> Result<f64> {
    let mut acc = IouAccumulator::default();
    acc.add_image(pred, gt, class_ids)?;
    Ok(acc.mean())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuResult {
    pub score: f64,
    pub p_n: Vec<f64>,
    pub bp: f64,
    pub c: u64,
    pub r: u64,
}

/// Clipped n-gram counts summed over candidate/reference pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuAccumulator {
    pub max_n: usize,
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub c: u64,
    pub r: u64,
}

fn ngram_counts(toks: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuAccumulator {
    pub fn new(max_n: usize) -> Self {
        Self { max_n, matches: vec![0; max_n], totals: vec![0; max_n], c: 0, r: 0 }
    }

    /// Adds one pair; START/END must already be stripped.
    pub fn add(&mut self, candidate: &[u32], reference: &[u32]) {
        self.c += candidate.len() as u64;
        self.r += reference.len() as u64;
        for n in 1..=self.max_n {
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            for (g, &k) in &cand {
                self.matches[n - 1] += k.min(refs.get(g).copied().unwrap_or(0));
                self.totals[n - 1] += k;
            }
        }
    }

    pub fn merge(&mut self, other: &BleuAccumulator) {
        for n in 0..self.max_n {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.c += other.c;
        self.r += other.r;
    }

    /// With `smooth`, orders above 1 use add-one counts.
    pub fn result(&self, smooth: bool) -> BleuResult {
        let p_n: Vec<f64> = (0..self.max_n)
            .map(|i| {
                let (m, t) = (self.matches[i] as f64, self.totals[i] as f64);
                if smooth && i > 0 {
                    (m + 1.0) / (t + 1.0)
                } else if t == 0.0 {
                    0.0
                } else {
                    m / t
                }
            })
            .collect();
        let bp = if self.c == 0 {
            0.0
        } else if self.c > self.r {
            1.0
        } else {
            (1.0 - self.r as f64 / self.c as f64).exp()
        };
        let score = if self.c == 0 || p_n.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            bp * (p_n.iter().map(|p| p.ln()).sum::<f64>() / self.max_n as f64).exp()
        };
        BleuResult { score, p_n, bp, c: self.c, r: self.r }
    }
}

/// Sentence BLEU with uniform weights `1/max_n` and no smoothing.
pub fn bleu(candidate: &[u32], reference: &[u32], max_n: usize) -> BleuResult {
    let mut acc = BleuAccumulator::new(max_n);
    acc.add(candidate, reference);
    acc.result(false)
}

/// Drops START/END and anything after END.
pub fn strip_caption(toks: &[u32], start: u32, end: u32) -> &[u32] {
    let body = toks.strip_prefix(&[start]).unwrap_or(toks);
    match body.iter().position(|&t| t == end) {
        Some(i) => &body[..i],
        None => body,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Queries whose best class probability is below this are dropped; 0 keeps all.
    pub score_threshold: f64,
    pub min_area: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { score_threshold: 0.0, min_area: 16 }
    }
}

/// Panoptic rendering of query outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub segments: Vec<PanSegment>,
    /// Per-pixel class id, background 0.
    pub class_map: Vec<u32>,
}

/// Assigns each pixel to the kept query maximizing `score * sigmoid(mask)`
/// (when that mask probability is at least 0.5), drops small segments, and
/// merges stuff segments of equal class.
pub fn render_panoptic(class_logits: &Tensor, mask_logits: &Tensor, class_ids: &[u32], tax: &Taxonomy, cfg: RenderConfig) -> Rendered {
    let (n, c, hw) = (class_logits.rows(), class_logits.cols(), mask_logits.cols());
    let mut kept = Vec::new();
    for q in 0..n {
        let row = class_logits.row(q);
        let (best, logit) = row.iter().enumerate().take(c).fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
        let score = sigmoid_scalar(logit);
        if score >= cfg.score_threshold {
            kept.push((q, class_ids[best], score));
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; hw];
    for (px, o) in owner.iter_mut().enumerate() {
        let mut best = (None, 0.0);
        for (k, &(q, _, score)) in kept.iter().enumerate() {
            let m = sigmoid_scalar(mask_logits.data[q * hw + px]);
            if m >= 0.5 && score * m > best.1 {
                best = (Some(k), score * m);
            }
        }
        *o = best.0;
    }
    let mut masks: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for (px, o) in owner.iter().enumerate() {
        if let Some(k) = o {
            masks.entry(*k).or_insert_with(|| vec![false; hw])[px] = true;
        }
    }
    let mut segments: Vec<PanSegment> = Vec::new();
    let mut stuff_index: HashMap<u32, usize> = HashMap::new();
    for (k, mask) in masks {
        if mask.iter().filter(|&&m| m).count() < cfg.min_area {
            continue;
        }
        let class_id = kept[k].1;
        if tax.kind(class_id) == Some(ClassKind::Stuff) {
            if let Some(&i) = stuff_index.get(&class_id) {
                segments[i].mask.iter_mut().zip(&mask).for_each(|(a, &b)| *a |= b);
                continue;
            }
            stuff_index.insert(class_id, segments.len());
        }
        segments.push(PanSegment { class_id, mask });
    }
    let mut class_map = vec![BACKGROUND; hw];
    for s in &segments {
        for (px, &m) in s.mask.iter().enumerate() {
            if m {
                class_map[px] = s.class_id;
            }
        }
    }
    Rendered { segments, class_map }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub all: Aggregate,
    pub things: Aggregate,
    pub stuff: Aggregate,
    pub old: Aggregate,
    pub new: Aggregate,
}

/// Evaluation of one model state on a validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub step: usize,
    pub per_class: BTreeMap<String, ClassScores>,
    pub aggregates: Aggregates,
    pub miou: f64,
    pub bleu: BleuResult,
    pub num_images: usize,
    /// Classes scored: every class seen so far.
    pub classes: Vec<u32>,
}

/// Builds a report; `old`/`new` partition the evaluated classes.
pub fn build_report(
    step: usize,
    pq: &PqAccumulator,
    miou: &IouAccumulator,
    bleu: &BleuAccumulator,
    tax: &Taxonomy,
    old: &BTreeSet<u32>,
    new: &BTreeSet<u32>,
    num_images: usize,
) -> EvalReport {
    let classes: BTreeSet<u32> = old.union(new).copied().collect();
    let of_kind = |k: ClassKind| -> BTreeSet<u32> { classes.iter().copied().filter(|&c| tax.kind(c) == Some(k)).collect() };
    let per_class = pq
        .per_class
        .iter()
        .filter(|(c, k)| classes.contains(c) && k.present())
        .map(|(c, k)| (c.to_string(), ClassScores { pq: k.pq(), sq: k.sq(), rq: k.rq() }))
        .collect();
    EvalReport {
        schema_version: EVAL_SCHEMA,
        step,
        per_class,
        aggregates: Aggregates {
            all: pq.aggregate(Some(&classes)),
            things: pq.aggregate(Some(&of_kind(ClassKind::Thing))),
            stuff: pq.aggregate(Some(&of_kind(ClassKind::Stuff))),
            old: pq.aggregate(Some(old)),
            new: pq.aggregate(Some(new)),
        },
        miou: miou.mean(),
        bleu: bleu.result(false),
        num_images,
        classes: classes.into_iter().collect(),
    }
}
