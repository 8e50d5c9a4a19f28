//! Property tests over randomly drawn inputs.

use std::collections::{BTreeMap, BTreeSet};

use cpp_lab::autodiff::{Graph, Tensor};
use cpp_lab::losses::{self, embedding_distance, loss_cbc, loss_icd, LossParts, LossWeights};
use cpp_lab::matching::{assignment_cost, iou, solve_assignment};
use cpp_lab::metrics::{bleu, mean_iou, panoptic_quality, PanSegment};
use cpp_lab::model::{Model, ModelConfig, Variant};
use cpp_lab::pseudo::{caption_pseudo_label, pixel_pseudo_labels, PixelPrediction, PseudoConfig, PseudoMode, Provenance};
use cpp_lab::schedule::{make_schedule, step_view, ProtocolMode, CLASS_ORDERS};
use cpp_lab::synthdata::{generate_dataset, CaptionParts, Taxonomy, Vocabulary, BACKGROUND};
use proptest::prelude::*;

fn brute_force_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn rec(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                rec(cost, rows, cols, r + 1, used, acc + cost[r * cols + c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, rows, cols, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}

fn cost_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=6).prop_flat_map(|cols| {
        (1usize..=cols).prop_flat_map(move |rows| {
            prop::collection::vec(0.0f64..10.0, rows * cols).prop_map(move |c| (rows, cols, c))
        })
    })
}

/// Random partition of a 16x16 grid into labelled segments.
fn segmentation(max_classes: u32) -> impl Strategy<Value = Vec<PanSegment>> {
    prop::collection::vec(0u32..6, 256).prop_flat_map(move |ids| {
        prop::collection::vec(1u32..=max_classes, 6).prop_map(move |classes| {
            let present: BTreeSet<u32> = ids.iter().copied().collect();
            present
                .into_iter()
                .map(|id| PanSegment { class_id: classes[id as usize], mask: ids.iter().map(|&x| x == id).collect() })
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_is_optimal_and_one_to_one((rows, cols, cost) in cost_matrix()) {
        let sol = solve_assignment(&cost, rows, cols).unwrap();
        let distinct: BTreeSet<usize> = sol.iter().copied().collect();
        prop_assert_eq!(distinct.len(), rows);
        let got = assignment_cost(&cost, cols, &sol);
        prop_assert!((got - brute_force_min(&cost, rows, cols)).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_and_one_only_for_equal_masks(
        a in prop::collection::vec(any::<bool>(), 16),
        b in prop::collection::vec(any::<bool>(), 16),
    ) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        let nonempty = a.iter().any(|&x| x);
        prop_assert_eq!(ab == 1.0, a == b && nonempty);
    }

    #[test]
    fn pq_bounds_and_identity(pred in segmentation(3), gt in segmentation(3)) {
        let acc = panoptic_quality(&pred, &gt).unwrap();
        for c in acc.per_class.values() {
            let (pq, sq, rq) = (c.pq(), c.sq(), c.rq());
            prop_assert!(0.0 <= pq && pq <= sq + 1e-15 && sq <= 1.0);
            prop_assert!((0.0..=1.0).contains(&rq));
            if c.tp > 0 {
                prop_assert!((pq - sq * rq).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pq_ignores_segment_order(pred in segmentation(3), gt in segmentation(3), k in 0usize..6) {
        let base = panoptic_quality(&pred, &gt).unwrap();
        let mut p2 = pred.clone();
        let n = p2.len().max(1);
        p2.rotate_left(k % n);
        let mut g2 = gt.clone();
        g2.reverse();
        let swapped = panoptic_quality(&p2, &g2).unwrap();
        for (id, c) in &base.per_class {
            let d = &swapped.per_class[id];
            prop_assert_eq!((c.tp, c.fp, c.fn_), (d.tp, d.fp, d.fn_));
            prop_assert!((c.iou_sum - d.iou_sum).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_in_unit_interval_and_one_on_identity(
        cand in prop::collection::vec(0u32..6, 0..12),
        refr in prop::collection::vec(0u32..6, 4..12),
    ) {
        let b = bleu(&cand, &refr, 4).score;
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((bleu(&refr, &refr, 4).score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn miou_is_symmetric(
        a in prop::collection::vec(0u32..4, 36),
        b in prop::collection::vec(0u32..4, 36),
    ) {
        let ids: BTreeSet<u32> = (0..4).collect();
        prop_assert_eq!(mean_iou(&a, &b, &ids).unwrap(), mean_iou(&b, &a, &ids).unwrap());
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_finite_and_non_negative(
        logits in prop::collection::vec(-6.0f64..6.0, 24),
        gt in prop::collection::vec(any::<bool>(), 24),
        cap in prop::collection::vec(-4.0f64..4.0, 5 * 7),
        emb in prop::collection::vec(-2.0f64..2.0, 24),
    ) {
        let mut g = Graph::new();
        let gtf: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
        let x = g.param(tensor(vec![1, 24], logits.clone()));
        for v in [losses::loss_focal(&mut g, x, &gtf), losses::loss_dice(&mut g, x, &gtf)] {
            let v = g.value(v).item();
            prop_assert!(v.is_finite() && v >= 0.0);
        }
        let cls = g.param(tensor(vec![4, 6], logits.clone()));
        let a = cpp_lab::Assignment { pairs: vec![(1, 0)], unmatched: vec![0, 2, 3] };
        let l = losses::loss_cls(&mut g, cls, &a, &[2]);
        prop_assert!(g.value(l).item() >= 0.0);
        let c = g.param(tensor(vec![5, 7], cap));
        let l = losses::loss_cap(&mut g, c, &[0, 3, 4, 5, 1], 1).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
        let teacher = tensor(vec![4, 6], logits.iter().map(|v| v * 1.5).collect());
        let l = losses::loss_cid(&mut g, &teacher, cls, &[1.0, 0.5, 0.25, 0.0]).unwrap();
        prop_assert!(g.value(l).item() >= -1e-12);
        let qm = g.param(tensor(vec![4, 3], emb[..12].to_vec()));
        let qt = g.param(tensor(vec![4, 3], emb[12..].to_vec()));
        let l = loss_cbc(&mut g, qm, qt, 10.0, 10.0);
        let l = g.value(l).item();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&l));
    }

    #[test]
    fn cbc_ignores_row_scale(
        emb in prop::collection::vec(0.1f64..2.0, 24),
        row in 0usize..4,
    ) {
        let eval = |qm: Vec<f64>| {
            let mut g = Graph::new();
            let m = g.constant(tensor(vec![4, 3], qm));
            let t = g.constant(tensor(vec![4, 3], emb[12..].to_vec()));
            let l = loss_cbc(&mut g, m, t, 10.0, 10.0);
            g.value(l).item()
        };
        let mut scaled = emb[..12].to_vec();
        scaled[row * 3..row * 3 + 3].iter_mut().for_each(|v| *v *= 3.0);
        prop_assert!((eval(emb[..12].to_vec()) - eval(scaled)).abs() < 1e-6);
    }

    #[test]
    fn teacher_side_gets_no_gradient(emb in prop::collection::vec(-2.0f64..2.0, 36)) {
        let mut g = Graph::new();
        let tqm = g.param(tensor(vec![3, 3], emb[..9].to_vec()));
        let sqm = g.param(tensor(vec![3, 3], emb[9..18].to_vec()));
        let tqt = g.param(tensor(vec![3, 3], emb[18..27].to_vec()));
        let sqt = g.param(tensor(vec![3, 3], emb[27..].to_vec()));
        let groups = BTreeMap::from([(1u32, vec![0]), (2, vec![1, 2])]);
        let anchors = losses::class_embeddings(&mut g, tqm, &BTreeMap::from([(1u32, vec![0])]));
        let student = losses::class_embeddings(&mut g, sqm, &groups);
        let l = loss_icd(&mut g, tqm, sqm, tqt, sqt, &anchors, &student, 2);
        g.backward(l);
        for t in [tqm, tqt] {
            prop_assert!(g.grad(t).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
        }
        prop_assert!(g.grad(sqm).is_some());
    }

    #[test]
    fn total_without_cl_terms_is_base_sum(v in prop::collection::vec(0.0f64..5.0, 6)) {
        let mut g = Graph::new();
        let s: Vec<_> = v.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let parts = LossParts { cls: s[0], seg: s[1], cap: s[2], icd: Some(s[3]), cid: Some(s[4]), cbc: Some(s[5]) };
        let w = LossWeights { icd: false, cid: false, cbc: false, ..Default::default() };
        let t = losses::loss_total(&mut g, &parts, &w, true);
        prop_assert_eq!(g.value(t).item(), v[0] + v[1] + w.lambda * v[2]);
    }

    #[test]
    fn embedding_distance_in_range(emb in prop::collection::vec(-2.0f64..2.0, 12)) {
        let mut g = Graph::new();
        let a = g.constant(tensor(vec![2, 3], emb[..6].to_vec()));
        let b = g.constant(tensor(vec![2, 3], emb[6..].to_vec()));
        let d = embedding_distance(&mut g, a, b);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&g.value(d).item()));
    }
}

#[derive(Clone, Debug)]
struct PixelCase {
    gt: u32,
    pred_class: u32,
    prob: f64,
}

fn pixel_case() -> impl Strategy<Value = PixelCase> {
    (0u32..7, 1u32..7, 0.0f64..=1.0).prop_map(|(gt, pred_class, prob)| PixelCase { gt, pred_class, prob })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_labels_respect_protocol(
        cases in prop::collection::vec(pixel_case(), 1..40),
        gamma in 0.0f64..=1.0,
        sapl in any::<bool>(),
        caption_class in 1u32..7,
    ) {
        // Classes 1-2 old, 3-4 current, 5-6 future.
        let old = BTreeSet::from([1, 2]);
        let current = BTreeSet::from([3, 4]);
        let step_gt: Vec<u32> = cases.iter().map(|c| if current.contains(&c.gt) { c.gt } else { BACKGROUND }).collect();
        let preds: Vec<PixelPrediction> =
            cases.iter().map(|c| PixelPrediction { query: 0, class_id: c.pred_class, prob: c.prob }).collect();
        let mode = if sapl { PseudoMode::Sapl } else { PseudoMode::Fixed };
        let cfg = PseudoConfig { threshold: gamma, mode, ..Default::default() };
        let m = pixel_pseudo_labels(&preds, &step_gt, &current, &old, &BTreeSet::from([caption_class]), &cfg).unwrap();
        for (i, &l) in m.labels.iter().enumerate() {
            prop_assert!(l == BACKGROUND || old.contains(&l) || current.contains(&l));
            if current.contains(&step_gt[i]) {
                prop_assert_eq!(l, step_gt[i]);
                prop_assert_eq!(m.provenance[i], Provenance::NewGt);
            } else {
                prop_assert!(!current.contains(&l));
            }
        }
        let strict = PseudoConfig { threshold: 1.0, caption_override: false, ..Default::default() };
        let m = pixel_pseudo_labels(&preds, &step_gt, &current, &old, &old, &strict).unwrap();
        for (i, p) in m.provenance.iter().enumerate() {
            if *p == Provenance::OldPseudo {
                prop_assert_eq!(preds[i].prob, 1.0);
            }
        }
    }

    #[test]
    fn fused_captions_stay_grammatical(
        a in prop::collection::btree_map(1u32..=6, 1usize..=5, 0..4),
        b in prop::collection::btree_map(1u32..=6, 1usize..=5, 0..4),
        sa in prop::collection::btree_set(7u32..=8, 0..2),
        sb in prop::collection::btree_set(7u32..=8, 0..2),
    ) {
        let tax = Taxonomy::synthetic(6, 2);
        let vocab = Vocabulary::for_taxonomy(&tax);
        let render = |t: &BTreeMap<u32, usize>, s: &BTreeSet<u32>| {
            CaptionParts { things: t.iter().map(|(&c, &n)| (n, c)).collect(), stuff: s.iter().copied().collect() }.render(&vocab)
        };
        let (old, new) = (render(&a, &sa), render(&b, &sb));
        let fused = caption_pseudo_label(&old, &new, &vocab, &tax).unwrap();
        prop_assert_eq!(fused[0], vocab.start());
        prop_assert_eq!(*fused.last().unwrap(), vocab.end());
        prop_assert_eq!(fused.iter().filter(|&&t| t == vocab.start() || t == vocab.end()).count(), 2);
        let parts = CaptionParts::parse(&fused, &vocab, &tax).unwrap();
        let want: BTreeSet<u32> = a.keys().chain(b.keys()).copied().collect();
        prop_assert_eq!(parts.things.iter().map(|&(_, c)| c).collect::<BTreeSet<_>>(), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generation_is_pure_and_annotations_complete(seed in any::<u64>()) {
        let tax = Taxonomy::synthetic(8, 2);
        let vocab = Vocabulary::for_taxonomy(&tax);
        let a = generate_dataset(seed, 4, &tax, 32).unwrap();
        prop_assert_eq!(&a, &generate_dataset(seed, 4, &tax, 32).unwrap());
        for s in &a {
            let ids: BTreeSet<u32> = s.segments.iter().map(|x| x.id).collect();
            prop_assert_eq!(ids.len(), s.segments.len());
            prop_assert!(s.segment_map.iter().all(|id| ids.contains(id)));
            let named = vocab.mentioned_classes(&s.caption);
            let things = s.thing_classes();
            for c in tax.things().map(|c| c.id) {
                prop_assert_eq!(named.contains(&c), things.contains(&c));
            }
            prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn step_views_never_invent_classes(seed in any::<u64>(), order in 0usize..5, disjoint in any::<bool>()) {
        let tax = Taxonomy::synthetic(20, 3);
        let vocab = Vocabulary::for_taxonomy(&tax);
        let data = generate_dataset(seed, 24, &tax, 32).unwrap();
        let mode = if disjoint { ProtocolMode::Disjoint } else { ProtocolMode::Overlapped };
        let sched = make_schedule(&tax, 12, 4, &CLASS_ORDERS[order], mode, true).unwrap();
        let mut covered = BTreeSet::new();
        for t in 0..sched.num_steps() {
            let view = step_view(&data, &sched, t, &tax, &vocab).unwrap();
            let allowed: BTreeSet<u32> = view.classes.iter().copied().chain([BACKGROUND]).collect();
            for s in &view.samples {
                prop_assert!(s.class_map().iter().all(|c| allowed.contains(c)));
                prop_assert!(vocab.mentioned_classes(&s.caption).iter().all(|c| allowed.contains(c)));
            }
            covered.extend(view.source);
        }
        if !disjoint {
            for (i, s) in data.iter().enumerate() {
                prop_assert_eq!(covered.contains(&i), !s.thing_classes().is_empty());
            }
        }
    }
}

fn small_model(variant: Variant, seed: u64) -> Model {
    let cfg = ModelConfig {
        image_size: 16,
        feature_channels: 8,
        embed_dim: 6,
        hidden_dim: 8,
        num_queries: 5,
        mask_layers: 1,
        caption_layers: 1,
        vocab_size: 12,
        max_caption_len: 6,
        variant,
        seed,
        ..Default::default()
    };
    Model::new(cfg, &[1, 2, 3]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_outputs_keep_their_shapes(seed in any::<u64>(), pixels in prop::collection::vec(0.0f32..1.0, 3 * 256)) {
        let caption = [0u32, 4, 5, 6];
        let mut shapes = Vec::new();
        for variant in [Variant::Cpp, Variant::CppPlus] {
            let m = small_model(variant, seed);
            let out = m.forward(&pixels, Some(&caption)).unwrap();
            prop_assert_eq!(&out, &m.forward(&pixels, Some(&caption)).unwrap());
            shapes.push((
                out.class_logits.shape.clone(),
                out.mask_logits.shape.clone(),
                out.qm.shape.clone(),
                out.qt.as_ref().unwrap().shape.clone(),
                out.caption_logits.as_ref().unwrap().shape.clone(),
            ));
        }
        prop_assert_eq!(&shapes[0], &shapes[1]);
        let (cls, masks, qm, qt, cap) = &shapes[0];
        prop_assert_eq!(cls, &vec![5, 3]);
        prop_assert_eq!(masks, &vec![5, 256]);
        prop_assert_eq!(qm, &vec![5, 6]);
        prop_assert_eq!(qt, &vec![4, 6]);
        prop_assert_eq!(cap, &vec![4, 12]);
    }

    #[test]
    fn extending_classes_keeps_old_logits_bitwise(seed in any::<u64>(), k in 0usize..4) {
        let pixels: Vec<f32> = (0..3 * 256).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let mut m = small_model(Variant::Cpp, seed);
        let before = m.forward(&pixels, None).unwrap();
        let new_ids: Vec<u32> = (10..10 + k as u32).collect();
        m.extend_classes(&new_ids).unwrap();
        let after = m.forward(&pixels, None).unwrap();
        prop_assert_eq!(after.class_logits.cols(), 3 + k);
        for r in 0..5 {
            prop_assert_eq!(&before.class_logits.row(r)[..3], &after.class_logits.row(r)[..3]);
        }
        prop_assert_eq!(before.mask_logits, after.mask_logits);
    }
}
