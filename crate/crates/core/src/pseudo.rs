//! Asymmetric pseudo-labeling from the previous-step model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::{CaptionParts, Taxonomy, Vocabulary, BACKGROUND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// Confidence threshold only.
    Fixed,
    /// Threshold or caption membership.
    Sapl,
}

/// Whose per-pixel confidence gates the old label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    /// Γ.
    pub threshold: f64,
    pub caption_override: bool,
    pub mode: PseudoMode,
    pub confidence: ConfidenceSource,
    /// When false, no pseudo labels are produced at all.
    pub enabled: bool,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { threshold: 0.7, caption_override: true, mode: PseudoMode::Sapl, confidence: ConfidenceSource::Teacher, enabled: true }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("pseudo-label threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    fn caption_disjunct(&self) -> bool {
        self.caption_override && self.mode == PseudoMode::Sapl
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OldPseudo,
    NewGt,
    Background,
}

/// Old-model prediction at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPrediction {
    /// Winning query.
    pub query: usize,
    pub class_id: u32,
    pub prob: f64,
}

/// Per-pixel argmax over queries of `sigmoid(class) * sigmoid(mask)`,
/// taking each query's best class.
pub fn pixel_predictions(class_logits: &Tensor, mask_logits: &Tensor, class_ids: &[u32]) -> Vec<PixelPrediction> {
    let (n, hw) = (class_logits.rows(), mask_logits.cols());
    let best: Vec<(usize, f64)> = (0..n)
        .map(|q| {
            let row = class_logits.row(q);
            let (i, l) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
            (i, sigmoid_scalar(l))
        })
        .collect();
    (0..hw)
        .map(|px| {
            let mut win = PixelPrediction { query: 0, class_id: BACKGROUND, prob: -1.0 };
            for (q, &(ci, score)) in best.iter().enumerate() {
                let p = score * sigmoid_scalar(mask_logits.data[q * hw + px]);
                if p > win.prob {
                    win = PixelPrediction { query: q, class_id: class_ids[ci], prob: p };
                }
            }
            win
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMap {
    pub labels: Vec<u32>,
    pub provenance: Vec<Provenance>,
}

/// Fuses step ground truth with old-model predictions pixel by pixel.
///
/// A pixel keeps its step label when that label is a current class;
/// otherwise it takes the old class when that class was learned before and
/// is confident (`prob >= Γ`) or named in the old caption; otherwise background.
pub fn pixel_pseudo_labels(
    old: &[PixelPrediction],
    step_gt: &[u32],
    current: &BTreeSet<u32>,
    old_classes: &BTreeSet<u32>,
    old_caption_classes: &BTreeSet<u32>,
    cfg: &PseudoConfig,
) -> Result<PseudoMap> {
    if old.len() != step_gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", old.len(), step_gt.len())));
    }
    let mut labels = Vec::with_capacity(old.len());
    let mut provenance = Vec::with_capacity(old.len());
    for (p, &gt) in old.iter().zip(step_gt) {
        let (l, src) = if current.contains(&gt) {
            (gt, Provenance::NewGt)
        } else if cfg.enabled
            && old_classes.contains(&p.class_id)
            && (p.prob >= cfg.threshold || (cfg.caption_disjunct() && old_caption_classes.contains(&p.class_id)))
        {
            (p.class_id, Provenance::OldPseudo)
        } else {
            (BACKGROUND, Provenance::Background)
        };
        labels.push(l);
        provenance.push(src);
    }
    Ok(PseudoMap { labels, provenance })
}

fn check_sentence(toks: &[u32], vocab: &Vocabulary, which: &str) -> Result<()> {
    if toks.len() < 2 || toks[0] != vocab.start() || *toks.last().unwrap() != vocab.end() {
        return Err(Error::Caption(format!("{which} caption must start with START and end with END")));
    }
    let inner = &toks[1..toks.len() - 1];
    if inner.iter().any(|&t| t == vocab.start() || t == vocab.end()) {
        return Err(Error::Caption(format!("{which} caption has inner START/END")));
    }
    Ok(())
}

/// Old caption with END removed, joined to the new caption with START removed.
///
/// Template sentences are merged clause by clause so the result stays
/// grammatical and mentions each class once; other token streams are
/// concatenated, dropping new class fragments the old part already names.
pub fn caption_pseudo_label(old: &[u32], new: &[u32], vocab: &Vocabulary, tax: &Taxonomy) -> Result<Vec<u32>> {
    check_sentence(old, vocab, "old")?;
    check_sentence(new, vocab, "new")?;
    if old.len() == 2 {
        return Ok(new.to_vec());
    }
    if new.len() == 2 {
        return Ok(old.to_vec());
    }
    if let (Ok(a), Ok(b)) = (CaptionParts::parse(old, vocab, tax), CaptionParts::parse(new, vocab, tax)) {
        let mut things = a.things.clone();
        for (n, c) in b.things {
            if !things.iter().any(|&(_, k)| k == c) {
                things.push((n, c));
            }
        }
        let mut stuff = a.stuff.clone();
        for c in b.stuff {
            if !stuff.contains(&c) {
                stuff.push(c);
            }
        }
        things.sort_by_key(|&(_, c)| c);
        stuff.sort_unstable();
        return Ok(CaptionParts { things, stuff }.render(vocab));
    }
    let named: BTreeSet<u32> = old.iter().filter(|&&t| vocab.token_class(t).is_some()).copied().collect();
    let mut out = old[..old.len() - 1].to_vec();
    let body = &new[1..];
    let mut i = 0;
    while i < body.len() {
        let t = body[i];
        let is_count = vocab.token_count(t).is_some();
        let next_dup = body.get(i + 1).is_some_and(|n| named.contains(n));
        if is_count && next_dup {
            i += 2;
            continue;
        }
        if named.contains(&t) {
            i += 1;
            continue;
        }
        out.push(t);
        i += 1;
    }
    Ok(out)
}
