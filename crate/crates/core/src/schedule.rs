//! Class-incremental protocol: step partitions and per-step relabeled views.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{CaptionParts, ClassKind, PanopticSample, Taxonomy, Vocabulary, BACKGROUND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    Overlapped,
    Disjoint,
}

/// Ordered partition of classes into learning steps `[C^0, C^1, …, C^T]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalSchedule {
    pub steps: Vec<Vec<u32>>,
    pub mode: ProtocolMode,
    pub stuff_at_base: bool,
}

/// The five thing orders used for the class-order robustness sweep on a
/// 20-thing taxonomy; the first is ascending.
pub const CLASS_ORDERS: [[u32; 20]; 5] = [
    [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20],
    [5, 7, 8, 9, 12, 14, 15, 16, 19, 20, 1, 2, 4, 11, 13, 3, 6, 10, 17, 18],
    [3, 4, 5, 8, 9, 13, 15, 17, 19, 20, 7, 10, 11, 16, 18, 1, 2, 6, 12, 14],
    [1, 2, 3, 11, 12, 14, 15, 16, 18, 20, 7, 8, 10, 17, 19, 4, 5, 6, 9, 13],
    [2, 3, 5, 7, 9, 10, 12, 13, 14, 19, 1, 4, 8, 16, 17, 6, 11, 15, 18, 20],
];

pub fn class_order(label: char) -> Option<Vec<u32>> {
    let i = "abcde".find(label)?;
    Some(CLASS_ORDERS[i].to_vec())
}

/// Splits `order` into a base step of `base_count` classes followed by
/// `inc_count`-sized steps.
///
/// With `stuff_at_base`, `order` ranges over thing classes and every stuff
/// class joins step 0; otherwise it ranges over all classes.
pub fn make_schedule(
    tax: &Taxonomy,
    base_count: usize,
    inc_count: usize,
    order: &[u32],
    mode: ProtocolMode,
    stuff_at_base: bool,
) -> Result<IncrementalSchedule> {
    let pool: BTreeSet<u32> = if stuff_at_base {
        tax.things().map(|c| c.id).collect()
    } else {
        tax.classes.iter().map(|c| c.id).collect()
    };
    let given: BTreeSet<u32> = order.iter().copied().collect();
    if given.len() != order.len() || given != pool {
        return Err(Error::Config(format!(
            "order must be a permutation of the {} {} class ids",
            pool.len(),
            if stuff_at_base { "thing" } else { "taxonomy" }
        )));
    }
    if base_count == 0 || inc_count == 0 {
        return Err(Error::Config("base and increment sizes must be positive".into()));
    }
    let rest = pool.len().checked_sub(base_count).ok_or_else(|| {
        Error::Config(format!("base size {base_count} exceeds the {} available classes", pool.len()))
    })?;
    if rest == 0 || rest % inc_count != 0 {
        return Err(Error::Config(format!(
            "{base_count} + k*{inc_count} must equal {} for some k >= 1",
            pool.len()
        )));
    }
    let mut base = order[..base_count].to_vec();
    if stuff_at_base {
        base.extend(tax.stuff().map(|c| c.id));
    }
    let mut steps = vec![base];
    steps.extend(order[base_count..].chunks(inc_count).map(<[u32]>::to_vec));
    Ok(IncrementalSchedule { steps, mode, stuff_at_base })
}

/// Parses a task label such as `"15-5"`, where the first number counts every
/// base-step class (stuff included when it is learned at the base step).
pub fn schedule_from_label(
    tax: &Taxonomy,
    label: &str,
    order: &[u32],
    mode: ProtocolMode,
    stuff_at_base: bool,
) -> Result<IncrementalSchedule> {
    let (b, i) = label.split_once('-').ok_or_else(|| Error::Config(format!("task label {label:?} is not <base>-<inc>")))?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad number in task label {label:?}")));
    let (b, i) = (parse(b)?, parse(i)?);
    let n_stuff = if stuff_at_base { tax.stuff().count() } else { 0 };
    let base = b.checked_sub(n_stuff).ok_or_else(|| Error::Config(format!("label {label:?} smaller than the stuff count")))?;
    make_schedule(tax, base, i, order, mode, stuff_at_base)
}

impl IncrementalSchedule {
    /// Single step over every class, for the offline upper bound.
    pub fn offline(tax: &Taxonomy) -> Self {
        let mut all: Vec<u32> = tax.things().map(|c| c.id).collect();
        all.extend(tax.stuff().map(|c| c.id));
        Self { steps: vec![all], mode: ProtocolMode::Overlapped, stuff_at_base: true }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// `C^{0:t}`.
    pub fn seen_through(&self, t: usize) -> BTreeSet<u32> {
        self.steps[..=t.min(self.steps.len() - 1)].iter().flatten().copied().collect()
    }

    /// `C^{0:t-1}`; empty at step 0.
    pub fn old_before(&self, t: usize) -> BTreeSet<u32> {
        self.steps[..t.min(self.steps.len())].iter().flatten().copied().collect()
    }

    pub fn validate(&self, tax: &Taxonomy) -> Result<()> {
        if self.steps.is_empty() || self.steps[0].is_empty() {
            return Err(Error::Config("schedule needs a nonempty base step".into()));
        }
        let mut seen = BTreeSet::new();
        for c in self.steps.iter().flatten() {
            if tax.get(*c).is_none() {
                return Err(Error::Config(format!("class {c} not in taxonomy")));
            }
            if !seen.insert(*c) {
                return Err(Error::Config(format!("class {c} appears in two steps")));
            }
        }
        Ok(())
    }
}

/// Training data visible at one step, with labels outside `C^t` collapsed to background.
#[derive(Clone, Debug)]
pub struct StepView {
    pub t: usize,
    pub classes: Vec<u32>,
    pub samples: Vec<PanopticSample>,
    /// Index of each view sample in the source dataset.
    pub source: Vec<usize>,
}

/// Keeps only segments whose class is in `keep`; other pixels become background
/// (segment id 0) and their caption fragments are dropped.
pub fn relabel_sample(
    s: &PanopticSample,
    keep: &BTreeSet<u32>,
    tax: &Taxonomy,
    vocab: &Vocabulary,
) -> Result<PanopticSample> {
    let kept: BTreeSet<u32> = s.segments.iter().filter(|x| keep.contains(&x.class_id)).map(|x| x.id).collect();
    let segment_map = s.segment_map.iter().map(|&id| if kept.contains(&id) { id } else { BACKGROUND }).collect();
    let segments = s.segments.iter().filter(|x| kept.contains(&x.id)).copied().collect();
    let mut parts = CaptionParts::parse(&s.caption, vocab, tax)?;
    parts.things.retain(|(_, c)| keep.contains(c));
    parts.stuff.retain(|c| keep.contains(c));
    Ok(PanopticSample {
        size: s.size,
        image: s.image.clone(),
        segment_map,
        segments,
        caption: parts.render(vocab),
    })
}

pub fn step_view(
    data: &[PanopticSample],
    sched: &IncrementalSchedule,
    t: usize,
    tax: &Taxonomy,
    vocab: &Vocabulary,
) -> Result<StepView> {
    if t >= sched.steps.len() {
        return Err(Error::Invalid(format!("step {t} out of range for {} steps", sched.steps.len())));
    }
    let current: BTreeSet<u32> = sched.steps[t].iter().copied().collect();
    let seen = sched.seen_through(t);
    let mut samples = Vec::new();
    let mut source = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let classes = s.classes();
        let has_current = classes.iter().any(|c| current.contains(c));
        let keep = match sched.mode {
            ProtocolMode::Overlapped => has_current,
            ProtocolMode::Disjoint => has_current && classes.is_subset(&seen),
        };
        if keep {
            samples.push(relabel_sample(s, &current, tax, vocab)?);
            source.push(i);
        }
    }
    Ok(StepView { t, classes: sched.steps[t].clone(), samples, source })
}

/// Whether `class_id` is a thing under `tax`.
pub fn is_thing(tax: &Taxonomy, class_id: u32) -> bool {
    tax.kind(class_id) == Some(ClassKind::Thing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn ascending(n: u32) -> Vec<u32> {
        (1..=n).collect()
    }

    #[test]
    fn task_labels_reproduce_step_counts() {
        let tax = Taxonomy::synthetic(20, 5);
        let order = ascending(20);
        for (label, steps) in [("20-5", 2), ("15-5", 3), ("15-2", 6), ("10-5", 4)] {
            let s = schedule_from_label(&tax, label, &order, ProtocolMode::Overlapped, true).unwrap();
            assert_eq!(s.num_steps(), steps, "{label}");
        }
        let s = schedule_from_label(&tax, "15-5", &order, ProtocolMode::Overlapped, true).unwrap();
        assert_eq!(s.steps[1].len(), 5);
        assert_eq!(s.steps[2].len(), 5);
    }

    #[test]
    fn base_covering_every_class_is_rejected() {
        let tax = Taxonomy::synthetic(20, 3);
        let err = make_schedule(&tax, 20, 5, &ascending(20), ProtocolMode::Overlapped, true);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = make_schedule(&tax, 12, 5, &ascending(20), ProtocolMode::Overlapped, true);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = make_schedule(&tax, 12, 4, &ascending(19), ProtocolMode::Overlapped, true);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn class_orders_give_distinct_equal_sized_schedules() {
        let tax = Taxonomy::synthetic(20, 3);
        let scheds: Vec<_> = "abcde"
            .chars()
            .map(|l| make_schedule(&tax, 12, 4, &class_order(l).unwrap(), ProtocolMode::Overlapped, true).unwrap())
            .collect();
        for (i, a) in scheds.iter().enumerate() {
            assert_eq!(a.steps.iter().map(Vec::len).collect::<Vec<_>>(), vec![15, 4, 4]);
            a.validate(&tax).unwrap();
            for b in &scheds[i + 1..] {
                let sa: BTreeSet<_> = a.steps[0].iter().collect();
                let sb: BTreeSet<_> = b.steps[0].iter().collect();
                assert_ne!(sa, sb);
            }
        }
    }

    #[test]
    fn step_views_respect_protocols() {
        let tax = Taxonomy::default_synthetic();
        let vocab = Vocabulary::for_taxonomy(&tax);
        let data = generate_dataset(5, 120, &tax, 32).unwrap();
        for mode in [ProtocolMode::Overlapped, ProtocolMode::Disjoint] {
            let sched = make_schedule(&tax, 12, 4, &ascending(20), mode, true).unwrap();
            for t in 0..sched.num_steps() {
                let view = step_view(&data, &sched, t, &tax, &vocab).unwrap();
                let cur: BTreeSet<u32> = sched.steps[t].iter().copied().collect();
                for (s, &src) in view.samples.iter().zip(&view.source) {
                    let labels: BTreeSet<u32> = s.class_map().into_iter().collect();
                    assert!(labels.iter().all(|c| *c == BACKGROUND || cur.contains(c)));
                    assert!(vocab.mentioned_classes(&s.caption).is_subset(&cur));
                    assert_eq!(s.segment_map.len(), s.size * s.size);
                    if mode == ProtocolMode::Disjoint {
                        assert!(data[src].classes().is_subset(&sched.seen_through(t)));
                    }
                }
            }
            assert!(step_view(&data, &sched, sched.num_steps(), &tax, &vocab).is_err());
        }
    }

    #[test]
    fn future_only_image_handling() {
        let tax = Taxonomy::default_synthetic();
        let vocab = Vocabulary::for_taxonomy(&tax);
        let data = generate_dataset(9, 200, &tax, 32).unwrap();
        let sched_o = make_schedule(&tax, 12, 4, &ascending(20), ProtocolMode::Overlapped, true).unwrap();
        let sched_d = IncrementalSchedule { mode: ProtocolMode::Disjoint, ..sched_o.clone() };
        let view_o = step_view(&data, &sched_o, 1, &tax, &vocab).unwrap();
        let view_d = step_view(&data, &sched_d, 1, &tax, &vocab).unwrap();
        let future: BTreeSet<u32> = sched_o.steps[2].iter().copied().collect();
        let step1: BTreeSet<u32> = sched_o.steps[1].iter().copied().collect();
        let mut checked = 0;
        for (i, s) in data.iter().enumerate() {
            let things = s.thing_classes();
            if things.iter().any(|c| future.contains(c)) {
                assert!(!view_d.source.contains(&i));
                let has_cur = things.iter().any(|c| step1.contains(c));
                assert_eq!(view_o.source.contains(&i), has_cur);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }
}
