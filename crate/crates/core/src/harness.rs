//! Multi-step continual training, evaluation, and experiment records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{sigmoid_scalar, Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    class_embeddings, cid_quality, loss_cap, loss_cbc, loss_cid, loss_cls, loss_icd, loss_seg, loss_total, LossParts,
    LossWeights,
};
use crate::matching::{hungarian_match, iou, CostWeights, GtSegment};
use crate::metrics::{
    build_report, render_panoptic, strip_caption, BleuAccumulator, EvalReport, IouAccumulator, PanSegment, PqAccumulator,
    RenderConfig,
};
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::{accumulate, poly_lr, Bound, Optimizer, OptimizerConfig};
use crate::pseudo::{caption_pseudo_label, pixel_predictions, pixel_pseudo_labels, ConfidenceSource, PseudoConfig, Provenance};
use crate::schedule::{class_order, make_schedule, relabel_sample, step_view, IncrementalSchedule, ProtocolMode, StepView};
use crate::synthdata::{
    generate_dataset, load_dataset, save_dataset, CaptionParts, ClassKind, PanopticSample, SegmentInfo, Taxonomy, Vocabulary, BACKGROUND,
};

pub const CONFIG_SCHEMA: u32 = 1;
pub const RECORD_SCHEMA: u32 = 1;
pub const THREADS_ENV: &str = "CPP_LAB_THREADS";
/// Pseudo segments smaller than this are left as background.
pub const MIN_PSEUDO_AREA: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Cpp,
    CppPlus,
    Offline,
}

impl Method {
    pub fn variant(self) -> Variant {
        match self {
            Method::CppPlus => Variant::CppPlus,
            _ => Variant::Cpp,
        }
    }

    /// Whether later steps train against a frozen previous-step model.
    pub fn uses_teacher(self) -> bool {
        matches!(self, Method::Cpp | Method::CppPlus)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub image_size: usize,
    pub things: usize,
    pub stuff: usize,
    /// Load training samples from a dataset directory instead of generating.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 7, train: 200, val: 100, image_size: 64, things: 20, stuff: 3, train_dir: None, val_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSpec {
    /// One of the named orders `a`–`e`.
    Named(char),
    Explicit(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    pub base: usize,
    pub increment: usize,
    pub order: OrderSpec,
    pub mode: ProtocolMode,
    pub stuff_at_base: bool,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { base: 12, increment: 4, order: OrderSpec::Named('a'), mode: ProtocolMode::Overlapped, stuff_at_base: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_per_step: usize,
    /// Epochs at step 0 when set; later steps use `epochs_per_step`.
    pub base_epochs: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Learning-rate multiplier for incremental steps.
    pub incremental_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_step: 15,
            base_epochs: None,
            batch_size: 1,
            optimizer: OptimizerConfig { lr: 0.003, ..Default::default() },
            incremental_lr_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beam: usize,
    pub render: RenderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beam: 5, render: RenderConfig::default() }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub method: Method,
    pub data: DataConfig,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub pseudo: PseudoConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            name: "cpp".into(),
            seed: 0,
            method: Method::Cpp,
            data: DataConfig::default(),
            schedule: ScheduleSpec::default(),
            model: ModelConfig::default(),
            losses: LossWeights::default(),
            pseudo: PseudoConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `method`; CPP+ also turns on the consistency loss.
    pub fn for_method(method: Method) -> Self {
        let mut c = Self { method, ..Self::default() };
        c.losses.cbc = method == Method::CppPlus;
        c.name = format!("{method:?}").to_lowercase();
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!("unsupported config schema {}", self.schema_version)));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?} must be a nonempty path component", self.name)));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.eval.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(self.train.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.losses.validate()?;
        self.pseudo.validate()?;
        self.model_config().validate()?;
        let tax = self.taxonomy();
        tax.validate()?;
        self.schedule_for(&tax)?;
        Ok(())
    }

    pub fn taxonomy(&self) -> Taxonomy {
        Taxonomy::synthetic(self.data.things, self.data.stuff)
    }

    /// Model config with data-dependent fields filled in.
    pub fn model_config(&self) -> ModelConfig {
        let tax = self.taxonomy();
        ModelConfig {
            image_size: self.data.image_size,
            vocab_size: Vocabulary::for_taxonomy(&tax).len(),
            variant: self.method.variant(),
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// The continual schedule (also for offline runs, whose old/new split it defines).
    pub fn schedule_for(&self, tax: &Taxonomy) -> Result<IncrementalSchedule> {
        let order = match &self.schedule.order {
            OrderSpec::Named(c) => {
                let o = class_order(*c).ok_or_else(|| Error::Config(format!("unknown class order {c:?}")))?;
                if o.len() != tax.things().count() {
                    return Err(Error::Config("named class orders need exactly 20 thing classes".into()));
                }
                o
            }
            OrderSpec::Explicit(v) => v.clone(),
        };
        let s = &self.schedule;
        make_schedule(tax, s.base, s.increment, &order, s.mode, s.stuff_at_base)
    }

    /// Stable hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::io(path, e))
}

/// Evaluation worker count from `CPP_LAB_THREADS`, default 1.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n >= 1).unwrap_or(1)
}

/// Shared, read-only inputs of one experiment.
pub struct Context {
    pub tax: Taxonomy,
    pub vocab: Vocabulary,
    pub schedule: IncrementalSchedule,
    pub train: Vec<PanopticSample>,
    pub val: Vec<PanopticSample>,
}

impl Context {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let tax = cfg.taxonomy();
        let vocab = Vocabulary::for_taxonomy(&tax);
        let schedule = cfg.schedule_for(&tax)?;
        let d = &cfg.data;
        let load = |dir: &Option<PathBuf>, seed: u64, n: usize| -> Result<Vec<PanopticSample>> {
            match dir {
                Some(dir) => {
                    let (m, samples) = load_dataset(dir)?;
                    if m.taxonomy != tax || m.image_size != d.image_size {
                        return Err(Error::Config(format!("{}: dataset taxonomy or size differs from config", dir.display())));
                    }
                    Ok(samples)
                }
                None => generate_dataset(seed, n, &tax, d.image_size),
            }
        };
        let train = load(&d.train_dir, d.seed, d.train)?;
        let val = load(&d.val_dir, d.seed.wrapping_add(0x9e37_79b9), d.val)?;
        Ok(Self { tax, vocab, schedule, train, val })
    }
}

/// One training target: head column and soft mask.
#[derive(Clone, Debug)]
struct Target {
    class_id: u32,
    mask: Vec<f64>,
}

/// Frozen previous-step outputs reused across epochs.
#[derive(Clone, Debug)]
struct TeacherCache {
    class_logits: Tensor,
    mask_logits: Tensor,
    qm: Tensor,
    qt: Tensor,
}

#[derive(Clone, Debug)]
struct TrainItem {
    image: Vec<f32>,
    targets: Vec<Target>,
    caption: Vec<u32>,
    teacher: Option<TeacherCache>,
}

/// Fused targets of one sample, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedTargets {
    pub labels: Vec<u32>,
    pub provenance: Vec<Provenance>,
    pub caption: Vec<u32>,
}

fn targets_from_view_sample(s: &PanopticSample) -> Vec<Target> {
    s.segments
        .iter()
        .map(|seg| Target {
            class_id: seg.class_id,
            mask: s.segment_map.iter().map(|&id| if id == seg.id { 1.0 } else { 0.0 }).collect(),
        })
        .collect()
}

/// Old-class pseudo segments: one per (teacher query, class) for things,
/// one per class for stuff.
fn pseudo_segments(labels: &mut [u32], provenance: &mut [Provenance], queries: &[usize], tax: &Taxonomy) -> Vec<Target> {
    let hw = labels.len();
    let mut groups: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
    for px in 0..hw {
        if provenance[px] == Provenance::OldPseudo {
            let c = labels[px];
            let q = if tax.kind(c) == Some(ClassKind::Stuff) { usize::MAX } else { queries[px] };
            groups.entry((c, q)).or_default().push(px);
        }
    }
    let mut out = Vec::new();
    for ((c, _), pxs) in groups {
        if pxs.len() < MIN_PSEUDO_AREA {
            for px in pxs {
                labels[px] = BACKGROUND;
                provenance[px] = Provenance::Background;
            }
            continue;
        }
        let mut mask = vec![0.0; hw];
        pxs.iter().for_each(|&px| mask[px] = 1.0);
        out.push(Target { class_id: c, mask });
    }
    out
}

/// Teacher caption restricted to old classes; `[START, END]` when it does not parse.
fn teacher_caption(teacher: &Model, image: &[f32], old: &BTreeSet<u32>, ctx: &Context) -> Result<Vec<u32>> {
    let v = &ctx.vocab;
    let (toks, _) = teacher.generate_caption(image, v.start(), v.end(), teacher.config.max_caption_len, 1)?;
    let empty = vec![v.start(), v.end()];
    let Ok(mut parts) = CaptionParts::parse(&toks, v, &ctx.tax) else { return Ok(empty) };
    parts.things.retain(|(_, c)| old.contains(c));
    parts.stuff.retain(|c| old.contains(c));
    if parts.things.is_empty() && parts.stuff.is_empty() {
        return Ok(empty);
    }
    Ok(parts.render(v))
}

/// Builds the fused pixel and caption targets for one step-view sample.
pub fn fuse_targets(
    teacher: &Model,
    sample: &PanopticSample,
    current: &BTreeSet<u32>,
    old: &BTreeSet<u32>,
    pseudo: &PseudoConfig,
    ctx: &Context,
) -> Result<FusedTargets> {
    let out = teacher.forward(&sample.image, None)?;
    let preds = pixel_predictions(&out.class_logits, &out.mask_logits, &teacher.class_ids);
    let old_caption = teacher_caption(teacher, &sample.image, old, ctx)?;
    let named = ctx.vocab.mentioned_classes(&old_caption);
    let map = pixel_pseudo_labels(&preds, &sample.class_map(), current, old, &named, pseudo)?;
    let caption = if pseudo.enabled {
        caption_pseudo_label(&old_caption, &sample.caption, &ctx.vocab, &ctx.tax)?
    } else {
        sample.caption.clone()
    };
    Ok(FusedTargets { labels: map.labels, provenance: map.provenance, caption })
}

fn prepare_items(
    model: &Model,
    view: &StepView,
    teacher: Option<&Model>,
    cfg: &ExperimentConfig,
    ctx: &Context,
    t: usize,
) -> Result<Vec<TrainItem>> {
    let current: BTreeSet<u32> = view.classes.iter().copied().collect();
    let old = ctx.schedule.old_before(t);
    let mut items = Vec::with_capacity(view.samples.len());
    for s in &view.samples {
        let Some(teacher) = teacher else {
            items.push(TrainItem { image: s.image.clone(), targets: targets_from_view_sample(s), caption: s.caption.clone(), teacher: None });
            continue;
        };
        let mut pseudo = cfg.pseudo.clone();
        if pseudo.confidence == ConfidenceSource::Student {
            // The student starts as a copy of the teacher, so both confidences agree at step start.
            pseudo.confidence = ConfidenceSource::Teacher;
        }
        let mut fused = fuse_targets(teacher, s, &current, &old, &pseudo, ctx)?;
        let out = teacher.forward(&s.image, None)?;
        let preds = pixel_predictions(&out.class_logits, &out.mask_logits, &teacher.class_ids);
        let queries: Vec<usize> = preds.iter().map(|p| p.query).collect();
        let mut targets = targets_from_view_sample(s);
        let mut extra = pseudo_segments(&mut fused.labels, &mut fused.provenance, &queries, &ctx.tax);
        // Every target needs its own query; the smallest pseudo segments give way.
        let room = model.config.num_queries.saturating_sub(targets.len());
        if extra.len() > room {
            extra.sort_by(|a, b| b.mask.iter().sum::<f64>().total_cmp(&a.mask.iter().sum::<f64>()));
            extra.truncate(room);
        }
        targets.extend(extra);
        let input = &fused.caption[..fused.caption.len() - 1];
        let tout = teacher.forward(&s.image, Some(input))?;
        let cache = TeacherCache {
            class_logits: tout.class_logits,
            mask_logits: tout.mask_logits,
            qm: tout.qm,
            qt: tout.qt.expect("caption requested"),
        };
        items.push(TrainItem { image: s.image.clone(), targets, caption: fused.caption, teacher: Some(cache) });
    }
    Ok(items)
}

/// Mean loss terms over the last epoch of a step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub samples: usize,
    pub iterations: usize,
    pub cls: f64,
    pub seg: f64,
    pub cap: f64,
    pub icd: f64,
    pub cid: f64,
    pub cbc: f64,
    pub total: f64,
}

/// Loss and gradients of one item.
fn item_gradients(
    model: &Model,
    teacher: Option<&Model>,
    item: &TrainItem,
    cfg: &ExperimentConfig,
    is_cl_step: bool,
    num_seen: usize,
    end: u32,
) -> Result<(Vec<Option<Vec<f64>>>, [f64; 7])> {
    let cols = model.class_columns();
    let mut g = Graph::new();
    let mut p = Bound::trainable(&model.store);
    let input = &item.caption[..item.caption.len() - 1];
    let fv = model.forward_graph(&mut g, &mut p, &item.image, Some(input))?;
    let gts: Vec<GtSegment> = item
        .targets
        .iter()
        .map(|t| GtSegment { class_index: cols[&t.class_id], mask: t.mask.iter().map(|&m| m > 0.5).collect() })
        .collect();
    let assign = hungarian_match(g.value(fv.class_logits), g.value(fv.mask_logits), &gts, CostWeights::default())?;
    let gt_cols: Vec<usize> = gts.iter().map(|s| s.class_index).collect();
    let masks: Vec<Vec<f64>> = item.targets.iter().map(|t| t.mask.clone()).collect();
    let w = &cfg.losses;
    let cls = loss_cls(&mut g, fv.class_logits, &assign, &gt_cols);
    let seg = loss_seg(&mut g, fv.mask_logits, &assign, &masks, w);
    let cap = loss_cap(&mut g, fv.caption_logits.expect("caption requested"), &item.caption, end)?;
    let qt = fv.qt.expect("caption requested");
    let mut parts = LossParts { cls, seg, cap, icd: None, cid: None, cbc: None };
    if let (true, Some(teacher), Some(cache)) = (is_cl_step, teacher, item.teacher.as_ref()) {
        if w.icd {
            let old: BTreeSet<u32> = teacher.class_ids.iter().copied().collect();
            let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for &(q, gi) in &assign.pairs {
                groups.entry(item.targets[gi].class_id).or_default().push(q);
            }
            let old_groups: BTreeMap<u32, Vec<usize>> = groups.iter().filter(|(c, _)| old.contains(c)).map(|(c, v)| (*c, v.clone())).collect();
            let tqm = g.constant(cache.qm.clone());
            let tqt = g.constant(cache.qt.clone());
            let anchors = class_embeddings(&mut g, tqm, &old_groups);
            let student = class_embeddings(&mut g, fv.qm, &groups);
            parts.icd = Some(loss_icd(&mut g, tqm, fv.qm, tqt, qt, &anchors, &student, num_seen));
        }
        if w.cid {
            let feats = g.value(fv.features).clone();
            let per_pixel = g.value(fv.per_pixel).clone();
            let via_teacher = teacher.decode_masks_from_features(&feats, &per_pixel);
            let hw = via_teacher.cols();
            let quality: Vec<f64> = (0..cache.class_logits.rows())
                .map(|r| {
                    let c = cache.class_logits.row(r).iter().map(|&x| sigmoid_scalar(x)).fold(0.0, f64::max);
                    let a: Vec<bool> = cache.mask_logits.row(r).iter().map(|&x| x >= 0.0).collect();
                    let b: Vec<bool> = via_teacher.data[r * hw..(r + 1) * hw].iter().map(|&x| x >= 0.0).collect();
                    cid_quality(c, iou(&a, &b).unwrap_or(0.0), w.gamma)
                })
                .collect();
            parts.cid = Some(loss_cid(&mut g, &cache.class_logits, fv.class_logits, &quality)?);
        }
    }
    if w.cbc {
        parts.cbc = Some(loss_cbc(&mut g, fv.qm, qt, w.tau_i2t, w.tau_t2i));
    }
    let total = loss_total(&mut g, &parts, w, is_cl_step);
    let val = |v: Option<crate::autodiff::Var>, g: &Graph| v.map(|v| g.value(v).item()).unwrap_or(0.0);
    let stats = [
        g.value(cls).item(),
        g.value(seg).item(),
        g.value(cap).item(),
        val(parts.icd, &g),
        val(parts.cid, &g),
        val(parts.cbc, &g),
        g.value(total).item(),
    ];
    g.backward(total);
    Ok((p.grads(&g), stats))
}

/// Trains `model` on one step view, extending its head with the view's classes.
///
/// `teacher` must be present exactly for incremental steps of methods that
/// distill from the previous model.
pub fn train_step(
    model: &mut Model,
    view: &StepView,
    cfg: &ExperimentConfig,
    teacher: Option<&Model>,
    ctx: &Context,
) -> Result<StepStats> {
    let t = view.t;
    let needs_teacher = t > 0 && cfg.method.uses_teacher();
    if needs_teacher != teacher.is_some() {
        return Err(Error::Invalid(format!(
            "step {t} of {:?} {} a teacher model",
            cfg.method,
            if needs_teacher { "requires" } else { "must not have" }
        )));
    }
    if let Some(teacher) = teacher {
        if teacher.step + 1 != t {
            return Err(Error::Invalid(format!("teacher from step {} cannot supervise step {t}", teacher.step)));
        }
    }
    let new: Vec<u32> = view.classes.iter().copied().filter(|c| !model.class_ids.contains(c)).collect();
    model.extend_classes(&new)?;
    model.step = t;
    let items = prepare_items(model, view, teacher, cfg, ctx, t)?;
    let epochs = if t == 0 { cfg.train.base_epochs.unwrap_or(cfg.train.epochs_per_step) } else { cfg.train.epochs_per_step };
    let bs = cfg.train.batch_size;
    let batches_per_epoch = items.len().div_ceil(bs);
    let max_iter = epochs * batches_per_epoch;
    let mut opt = Optimizer::new(cfg.train.optimizer.clone(), &model.store);
    let base_lr = cfg.train.optimizer.lr * if t > 0 { cfg.train.incremental_lr_scale } else { 1.0 };
    let num_seen = ctx.schedule.seen_through(t).len().max(view.classes.len());
    let is_cl_step = t > 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5157_u64 << 32) ^ t as u64);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut stats = StepStats { samples: items.len(), ..Default::default() };
    let mut iter = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 7];
        for batch in order.chunks(bs) {
            let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
            for &i in batch {
                let (g, s) = item_gradients(model, teacher, &items[i], cfg, is_cl_step, num_seen, ctx.vocab.end())?;
                accumulate(&mut grads, g, 1.0 / batch.len() as f64);
                sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            let lr = poly_lr(base_lr, iter, max_iter, cfg.train.optimizer.poly_power);
            opt.step(&mut model.store, &grads, lr);
            iter += 1;
        }
        if epoch + 1 == epochs && !items.is_empty() {
            let n = items.len() as f64;
            stats.cls = sums[0] / n;
            stats.seg = sums[1] / n;
            stats.cap = sums[2] / n;
            stats.icd = sums[3] / n;
            stats.cid = sums[4] / n;
            stats.cbc = sums[5] / n;
            stats.total = sums[6] / n;
        }
        log::debug!("step {t} epoch {epoch}: total {:.4}", sums[6] / items.len().max(1) as f64);
    }
    stats.iterations = iter;
    Ok(stats)
}

/// Per-image evaluation partial sums.
#[derive(Clone, Debug)]
struct EvalPartial {
    pq: PqAccumulator,
    miou: IouAccumulator,
    bleu: BleuAccumulator,
}

fn eval_chunk(model: &Model, samples: &[PanopticSample], seen: &BTreeSet<u32>, ctx: &Context, cfg: &EvalConfig) -> Result<EvalPartial> {
    let mut part = EvalPartial { pq: PqAccumulator::default(), miou: IouAccumulator::default(), bleu: BleuAccumulator::new(4) };
    let v = &ctx.vocab;
    for s in samples {
        let gt = relabel_sample(s, seen, &ctx.tax, v)?;
        let out = model.forward(&gt.image, None)?;
        let rendered = render_panoptic(&out.class_logits, &out.mask_logits, &model.class_ids, &ctx.tax, cfg.render);
        let gt_segs: Vec<PanSegment> =
            gt.segments.iter().map(|seg| PanSegment { class_id: seg.class_id, mask: gt.segment_mask(seg.id) }).collect();
        part.pq.add_image(&rendered.segments, &gt_segs)?;
        part.miou.add_image(&rendered.class_map, &gt.class_map(), seen)?;
        let (cap, _) = model.generate_caption(&gt.image, v.start(), v.end(), model.config.max_caption_len, cfg.beam)?;
        part.bleu.add(strip_caption(&cap, v.start(), v.end()), strip_caption(&gt.caption, v.start(), v.end()));
    }
    Ok(part)
}

/// Scores `model` on every class in `old ∪ new`; other classes count as background.
pub fn evaluate(
    model: &Model,
    ctx: &Context,
    cfg: &EvalConfig,
    step: usize,
    old: &BTreeSet<u32>,
    new: &BTreeSet<u32>,
) -> Result<EvalReport> {
    let seen: BTreeSet<u32> = old.union(new).copied().collect();
    let threads = eval_threads().min(ctx.val.len().max(1));
    let chunk = ctx.val.len().div_ceil(threads).max(1);
    let parts: Vec<Result<EvalPartial>> = if threads == 1 {
        vec![eval_chunk(model, &ctx.val, &seen, ctx, cfg)]
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = ctx.val.chunks(chunk).map(|c| sc.spawn(|| eval_chunk(model, c, &seen, ctx, cfg))).collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        })
    };
    let mut total = EvalPartial { pq: PqAccumulator::default(), miou: IouAccumulator::default(), bleu: BleuAccumulator::new(4) };
    for p in parts {
        let p = p?;
        total.pq.merge(&p.pq);
        total.miou.merge(&p.miou);
        total.bleu.merge(&p.bleu);
    }
    Ok(build_report(step, &total.pq, &total.miou, &total.bleu, &ctx.tax, old, new, ctx.val.len()))
}

fn meta_field<T: for<'de> Deserialize<'de>>(header: &crate::model::CheckpointHeader, key: &str, path: &Path) -> Result<T> {
    let v = header.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("{}: header lacks {key:?}", path.display())))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("{}: bad {key:?}: {e}", path.display())))
}

/// Scores a saved step checkpoint on a dataset directory, using the class
/// split and evaluation settings recorded in the checkpoint.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let (model, header) = Model::load_checkpoint(checkpoint, None)?;
    let tax: Taxonomy = meta_field(&header, "taxonomy", checkpoint)?;
    let steps: Vec<Vec<u32>> = meta_field(&header, "step_classes", checkpoint)?;
    let old: BTreeSet<u32> = meta_field(&header, "old_classes", checkpoint)?;
    let new: BTreeSet<u32> = meta_field(&header, "new_classes", checkpoint)?;
    let eval: EvalConfig = meta_field(&header, "eval", checkpoint)?;
    let (manifest, val) = load_dataset(data)?;
    if manifest.taxonomy != tax {
        return Err(Error::Config(format!("{}: dataset taxonomy differs from the checkpoint's", data.display())));
    }
    if manifest.image_size != model.config.image_size {
        return Err(Error::Config(format!(
            "{}: images are {}px, model expects {}px",
            data.display(),
            manifest.image_size,
            model.config.image_size
        )));
    }
    let vocab = Vocabulary::for_taxonomy(&tax);
    let schedule = IncrementalSchedule { steps, mode: ProtocolMode::Overlapped, stuff_at_base: true };
    let ctx = Context { tax, vocab, schedule, train: Vec::new(), val };
    evaluate(&model, &ctx, &eval, header.step, &old, &new)
}

/// Offset added to a class id to form the segment id of its pseudo-labelled pixels.
pub const PSEUDO_SEGMENT_BASE: u32 = 10_000;

/// Writes the fused targets of step `t` (teacher = `teacher`) as a dataset
/// under `dir`: ground-truth segments keep their ids, pseudo-labelled pixels
/// of old class `c` form segment `PSEUDO_SEGMENT_BASE + c`.
pub fn dump_pseudo_labels(cfg: &ExperimentConfig, ctx: &Context, teacher: &Model, t: usize, dir: &Path) -> Result<usize> {
    if t == 0 || t >= ctx.schedule.num_steps() {
        return Err(Error::Invalid(format!("no pseudo labels at step {t}")));
    }
    let view = step_view(&ctx.train, &ctx.schedule, t, &ctx.tax, &ctx.vocab)?;
    let current: BTreeSet<u32> = view.classes.iter().copied().collect();
    let old = ctx.schedule.old_before(t);
    let mut out = Vec::with_capacity(view.samples.len());
    for s in &view.samples {
        let fused = fuse_targets(teacher, s, &current, &old, &cfg.pseudo, ctx)?;
        let mut segments = s.segments.clone();
        let mut segment_map = s.segment_map.clone();
        let mut pseudo_classes = BTreeSet::new();
        for (px, (&l, &p)) in fused.labels.iter().zip(&fused.provenance).enumerate() {
            if p == Provenance::OldPseudo {
                segment_map[px] = PSEUDO_SEGMENT_BASE + l;
                pseudo_classes.insert(l);
            }
        }
        for c in pseudo_classes {
            let kind = ctx.tax.kind(c).ok_or_else(|| Error::Invalid(format!("class {c} not in taxonomy")))?;
            segments.push(SegmentInfo { id: PSEUDO_SEGMENT_BASE + c, class_id: c, kind });
        }
        out.push(PanopticSample { size: s.size, image: s.image.clone(), segment_map, segments, caption: fused.caption });
    }
    save_dataset(&out, &ctx.tax, None, dir)?;
    Ok(out.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Classes learned at this step.
    pub classes: Vec<u32>,
    pub report: EvalReport,
    pub stats: StepStats,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub name: String,
    pub method: Method,
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    /// Classes of steps before the last (`C^o`).
    pub old_classes: Vec<u32>,
    /// Classes of the last step (`C^n`).
    pub new_classes: Vec<u32>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.steps.last().map(|s| &s.report)
    }

    /// Final all-class PQ.
    pub fn final_pq(&self) -> f64 {
        self.final_report().map_or(0.0, |r| r.aggregates.all.pq)
    }

    pub fn final_old_pq(&self) -> f64 {
        self.final_report().map_or(0.0, |r| r.aggregates.old.pq)
    }

    pub fn final_new_pq(&self) -> f64 {
        self.final_report().map_or(0.0, |r| r.aggregates.new.pq)
    }
}

pub fn run_dir(out: &Path, name: &str) -> PathBuf {
    out.join("runs").join(name)
}

fn checkpoint_meta(ctx: &Context, cfg: &ExperimentConfig, t: usize, old: &BTreeSet<u32>, new: &BTreeSet<u32>) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("taxonomy".to_string(), serde_json::to_value(&ctx.tax).expect("taxonomy serializes")),
        ("step_classes".to_string(), serde_json::to_value(&ctx.schedule.steps[..=t.min(ctx.schedule.steps.len() - 1)]).expect("serializes")),
        ("old_classes".to_string(), serde_json::to_value(old).expect("serializes")),
        ("new_classes".to_string(), serde_json::to_value(new).expect("serializes")),
        ("eval".to_string(), serde_json::to_value(&cfg.eval).expect("serializes")),
        ("method".to_string(), serde_json::to_value(cfg.method).expect("serializes")),
    ])
}

/// A trained and evaluated step-0 model, shareable by runs whose step 0 is identical.
#[derive(Clone, Debug)]
pub struct BaseStep {
    pub key: String,
    pub model: Model,
    pub record: StepRecord,
}

/// Identifies everything step 0 depends on. `None` for offline runs.
pub fn base_step_key(cfg: &ExperimentConfig) -> Option<String> {
    if cfg.method == Method::Offline {
        return None;
    }
    let mut c = cfg.clone();
    c.name = String::new();
    c.save_checkpoints = false;
    if c.method == Method::Finetune {
        c.method = Method::Cpp;
    }
    c.losses.icd = false;
    c.losses.cid = false;
    c.pseudo = PseudoConfig::default();
    c.train.base_epochs = Some(cfg.train.base_epochs.unwrap_or(cfg.train.epochs_per_step));
    c.train.epochs_per_step = 0;
    c.train.incremental_lr_scale = 1.0;
    Some(c.hash())
}

/// Trains and evaluates step 0 of `cfg`.
pub fn train_base(cfg: &ExperimentConfig, ctx: &Context) -> Result<BaseStep> {
    let key = base_step_key(cfg).ok_or_else(|| Error::Invalid("offline runs have no shared base step".into()))?;
    let t0 = Instant::now();
    let view = step_view(&ctx.train, &ctx.schedule, 0, &ctx.tax, &ctx.vocab)?;
    let mut m = Model::new(cfg.model_config(), &[])?;
    let stats = train_step(&mut m, &view, cfg, None, ctx)?;
    let (old, new) = step_split(&ctx.schedule, 0);
    let report = evaluate(&m, ctx, &cfg.eval, 0, &old, &new)?;
    let record = StepRecord { step: 0, classes: view.classes, report, stats, checkpoint: None, wall_clock_s: t0.elapsed().as_secs_f64() };
    Ok(BaseStep { key, model: m, record })
}

/// Old/new classes scored after step `t`: `C^{0:t-1}` and `C^t`.
fn step_split(sched: &IncrementalSchedule, t: usize) -> (BTreeSet<u32>, BTreeSet<u32>) {
    (sched.old_before(t), sched.steps[t].iter().copied().collect())
}

/// Runs every step of `cfg`, writing artifacts under `out/runs/<name>/` when
/// `out` is given. An existing record with the same config hash is resumed.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunRecord> {
    let ctx = Context::build(cfg)?;
    run_with_context(cfg, &ctx, out, None)
}

/// Like [`run_experiment`]; a `base` with a matching key replaces training step 0.
pub fn run_with_context(cfg: &ExperimentConfig, ctx: &Context, out: Option<&Path>, base: Option<&BaseStep>) -> Result<RunRecord> {
    let started = Instant::now();
    let hash = cfg.hash();
    let dir = out.map(|o| run_dir(o, &cfg.name));
    let sched = &ctx.schedule;
    let last = sched.num_steps() - 1;
    let (c_old, c_new) = step_split(sched, last);
    let mut record = RunRecord {
        schema_version: RECORD_SCHEMA,
        name: cfg.name.clone(),
        method: cfg.method,
        config_hash: hash.clone(),
        steps: Vec::new(),
        old_classes: c_old.iter().copied().collect(),
        new_classes: c_new.iter().copied().collect(),
        wall_clock_s: 0.0,
    };
    let mut model: Option<Model> = None;
    if let Some(dir) = &dir {
        let path = dir.join("record.json");
        if path.exists() {
            let prev: RunRecord = read_json(&path)?;
            if prev.config_hash != hash {
                return Err(Error::Config(format!("{}: existing run has a different config hash", path.display())));
            }
            if let Some(ck) = prev.steps.last().and_then(|s| s.checkpoint.clone()) {
                let (m, _) = Model::load_checkpoint(&ck, None)?;
                model = Some(m);
                record = prev;
            }
        }
        cfg.save(&dir.join("experiment.json"))?;
    }
    if cfg.method == Method::Offline {
        if record.steps.is_empty() {
            let offline = IncrementalSchedule::offline(&ctx.tax);
            let view = step_view(&ctx.train, &offline, 0, &ctx.tax, &ctx.vocab)?;
            let mut m = Model::new(cfg.model_config(), &[])?;
            let mut budget = cfg.clone();
            budget.train.base_epochs = None;
            budget.train.epochs_per_step = (0..sched.num_steps())
                .map(|t| if t == 0 { cfg.train.base_epochs.unwrap_or(cfg.train.epochs_per_step) } else { cfg.train.epochs_per_step })
                .sum();
            let t0 = Instant::now();
            let stats = train_step(&mut m, &view, &budget, None, ctx)?;
            m.step = last;
            let report = evaluate(&m, ctx, &cfg.eval, last, &c_old, &c_new)?;
            let step = StepRecord { step: last, classes: view.classes, report, stats, checkpoint: None, wall_clock_s: t0.elapsed().as_secs_f64() };
            push_step(&mut record, step, &m, ctx, cfg, dir.as_deref())?;
        }
        record.wall_clock_s += started.elapsed().as_secs_f64();
        if let Some(dir) = &dir {
            write_json(&dir.join("record.json"), &record)?;
        }
        return Ok(record);
    }
    let base = base.filter(|b| Some(&b.key) == base_step_key(cfg).as_ref());
    let first = record.steps.len();
    for t in first..sched.num_steps() {
        let (m, step) = match (t, base) {
            (0, Some(b)) => (b.model.clone(), b.record.clone()),
            _ => {
                let t0 = Instant::now();
                let view = step_view(&ctx.train, sched, t, &ctx.tax, &ctx.vocab)?;
                let (mut m, teacher) = match model.take() {
                    None => (Model::new(cfg.model_config(), &[])?, None),
                    Some(prev) => {
                        let teacher = cfg.method.uses_teacher().then(|| prev.clone());
                        (prev, teacher)
                    }
                };
                let stats = train_step(&mut m, &view, cfg, teacher.as_ref(), ctx)?;
                let (old, new) = step_split(sched, t);
                let report = evaluate(&m, ctx, &cfg.eval, t, &old, &new)?;
                (m, StepRecord { step: t, classes: view.classes, report, stats, checkpoint: None, wall_clock_s: t0.elapsed().as_secs_f64() })
            }
        };
        push_step(&mut record, step, &m, ctx, cfg, dir.as_deref())?;
        if let Some(dir) = &dir {
            write_json(&dir.join("record.json"), &record)?;
        }
        model = Some(m);
    }
    record.wall_clock_s += started.elapsed().as_secs_f64();
    if let Some(dir) = &dir {
        write_json(&dir.join("record.json"), &record)?;
    }
    Ok(record)
}

/// Writes the step's artifacts under `dir` and appends it to `record`.
fn push_step(record: &mut RunRecord, mut step: StepRecord, m: &Model, ctx: &Context, cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<()> {
    let t = step.step;
    let report = &step.report;
    step.checkpoint = None;
    if let Some(dir) = dir {
        let sd = dir.join(format!("step_{t}"));
        write_json(&sd.join("eval.json"), report)?;
        if cfg.save_checkpoints {
            let path = sd.join("checkpoint");
            let (old, new): (BTreeSet<u32>, BTreeSet<u32>) =
                (report.classes.iter().copied().filter(|c| !step.classes.contains(c)).collect(), step.classes.iter().copied().collect());
            m.save_checkpoint(&path, &checkpoint_meta(ctx, cfg, t, &old, &new))?;
            step.checkpoint = Some(path);
        }
    }
    log::info!(
        "{}: step {t} PQ all {:.2} old {:.2} new {:.2}",
        cfg.name,
        100.0 * report.aggregates.all.pq,
        100.0 * report.aggregates.old.pq,
        100.0 * report.aggregates.new.pq
    );
    record.steps.push(step);
    Ok(())
}

/// Maps `f` over `items` on up to `workers` scoped threads, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(workers) {
        std::thread::scope(|sc| {
            let hs: Vec<_> = chunk.iter().map(|x| sc.spawn(|| f(x))).collect();
            out.extend(hs.into_iter().map(|h| h.join().expect("worker panicked")));
        });
    }
    out
}

/// Runs configs on up to `workers` threads; results keep input order. Runs
/// with identical step 0 share one trained base model.
pub fn run_many(cfgs: &[ExperimentConfig], out: Option<&Path>, workers: usize) -> Result<Vec<RunRecord>> {
    let ctxs: Vec<Context> = cfgs.iter().map(Context::build).collect::<Result<_>>()?;
    let mut firsts: BTreeMap<String, usize> = BTreeMap::new();
    for (i, c) in cfgs.iter().enumerate() {
        if let Some(k) = base_step_key(c) {
            firsts.entry(k).or_insert(i);
        }
    }
    let shared: Vec<usize> = firsts
        .values()
        .copied()
        .filter(|&i| cfgs.iter().filter(|c| base_step_key(c) == base_step_key(&cfgs[i])).count() > 1)
        .collect();
    let bases: Vec<BaseStep> = parallel_map(&shared, workers, |&i| train_base(&cfgs[i], &ctxs[i])).into_iter().collect::<Result<_>>()?;
    let idx: Vec<usize> = (0..cfgs.len()).collect();
    parallel_map(&idx, workers, |&i| {
        let key = base_step_key(&cfgs[i]);
        let base = bases.iter().find(|b| Some(&b.key) == key.as_ref());
        run_with_context(&cfgs[i], &ctxs[i], out, base)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: ExperimentConfig,
    pub record: RunRecord,
}

/// Rows of the module ablation table, each adding one switch to the row above.
/// Rows without SAPL use fixed-threshold pseudo-labeling, so `+CBC` is the
/// fixed-Γ counterpart of `+SAPL`.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    use crate::pseudo::PseudoMode::{Fixed, Sapl};
    let m = if base.method == Method::CppPlus { Method::CppPlus } else { Method::Cpp };
    let rows = [
        ("finetune", Method::Finetune, false, false, false, Fixed),
        ("+ICD", m, true, false, false, Fixed),
        ("+CID", m, false, true, false, Fixed),
        ("+ICD&CID", m, true, true, false, Fixed),
        ("+CBC", m, true, true, true, Fixed),
        ("+SAPL", m, true, true, true, Sapl),
    ];
    rows.into_iter()
        .map(|(label, method, icd, cid, cbc, mode)| {
            let mut c = base.clone();
            let slug = label.trim_start_matches('+').replace('&', "-").to_lowercase();
            c.name = format!("{}-{slug}", base.name);
            c.method = method;
            c.losses.icd = icd;
            c.losses.cid = cid;
            c.losses.cbc = cbc;
            c.pseudo.enabled = true;
            c.pseudo.mode = mode;
            (label.to_string(), c)
        })
        .collect()
}

pub fn ablation_suite(base: &ExperimentConfig, out: Option<&Path>, workers: usize) -> Result<Vec<AblationRow>> {
    let cfgs = ablation_configs(base);
    let plain: Vec<ExperimentConfig> = cfgs.iter().map(|(_, c)| c.clone()).collect();
    let records = run_many(&plain, out, workers)?;
    Ok(cfgs.into_iter().zip(records).map(|((label, config), record)| AblationRow { label, config, record }).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSweep {
    pub orders: Vec<char>,
    pub final_pq: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub records: Vec<RunRecord>,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the base config under orders `a`–`e` and summarizes final all-class PQ.
pub fn orders_sweep(base: &ExperimentConfig, out: Option<&Path>, workers: usize) -> Result<OrderSweep> {
    let orders: Vec<char> = "abcde".chars().collect();
    let cfgs: Vec<ExperimentConfig> = orders
        .iter()
        .map(|&o| {
            let mut c = base.clone();
            c.name = format!("{}-order-{o}", base.name);
            c.schedule.order = OrderSpec::Named(o);
            c
        })
        .collect();
    let records = run_many(&cfgs, out, workers)?;
    let final_pq: Vec<f64> = records.iter().map(|r| 100.0 * r.final_pq()).collect();
    let (mean, std) = mean_std(&final_pq);
    Ok(OrderSweep { orders, final_pq, mean, std, records })
}

/// One row of the per-step summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub num_classes: usize,
    pub pq_old: f64,
    pub pq_new: f64,
    pub pq_all: f64,
    pub miou: f64,
    pub bleu: f64,
}

pub fn report_rows(record: &RunRecord) -> Vec<ReportRow> {
    record
        .steps
        .iter()
        .map(|s| ReportRow {
            step: s.step,
            num_classes: s.report.classes.len(),
            pq_old: 100.0 * s.report.aggregates.old.pq,
            pq_new: 100.0 * s.report.aggregates.new.pq,
            pq_all: 100.0 * s.report.aggregates.all.pq,
            miou: 100.0 * s.report.miou,
            bleu: 100.0 * s.report.bleu.score,
        })
        .collect()
}

/// Human-readable table of a run: PQ on old/new/all classes per step and
/// caption BLEU before (first step) and after (last step) the continual steps.
pub fn format_report(record: &RunRecord) -> String {
    let mut s = format!("run {} ({:?})\n", record.name, record.method);
    s += &format!("{:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "step", "classes", "PQ C^o", "PQ C^n", "PQ C^a", "mIoU", "BLEU");
    for r in report_rows(record) {
        s += &format!(
            "{:>4} {:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            r.step, r.num_classes, r.pq_old, r.pq_new, r.pq_all, r.miou, r.bleu
        );
    }
    if let (Some(first), Some(last)) = (record.steps.first(), record.steps.last()) {
        s += &format!("B^b {:.2}  B^a {:.2}\n", 100.0 * first.report.bleu.score, 100.0 * last.report.bleu.score);
    }
    s
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<10} {:>8} {:>8} {:>8}\n", "setting", "PQ C^o", "PQ C^n", "PQ C^a");
    for r in rows {
        s += &format!(
            "{:<10} {:>8.2} {:>8.2} {:>8.2}\n",
            r.label,
            100.0 * r.record.final_old_pq(),
            100.0 * r.record.final_new_pq(),
            100.0 * r.record.final_pq()
        );
    }
    s
}
