//! Bipartite assignment of query predictions to ground-truth segments.

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_with_logits_scalar, sigmoid_scalar, Tensor};
use crate::error::{Error, Result};

pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("iou of masks with {} and {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// One target segment: head column of its class and its pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GtSegment {
    pub class_index: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub focal: f64,
    pub dice: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { class: 1.0, focal: 20.0, dice: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(query, gt)` pairs ordered by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn query_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

/// Minimum-cost assignment of every row to a distinct column.
///
/// `cost` is row-major `rows x cols` with `rows <= cols`. Returns the column
/// of each row.
pub fn solve_assignment(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if rows > cols {
        return Err(Error::Invalid(format!("cannot assign {rows} rows to {cols} columns")));
    }
    if cost.len() != rows * cols {
        return Err(Error::Shape(format!("cost has {} entries, expected {rows}x{cols}", cost.len())));
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    // Shortest augmenting paths with potentials; index 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Sum of `cost[r][cols_of[r]]` in row order.
pub fn assignment_cost(cost: &[f64], cols: usize, cols_of: &[usize]) -> f64 {
    cols_of.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum()
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// `[gt, query]` matching cost from sigmoid class and mask probabilities.
pub fn match_cost(class_logits: &Tensor, mask_logits: &Tensor, gt: &[GtSegment], w: CostWeights) -> Result<Vec<f64>> {
    let (n, c) = (class_logits.rows(), class_logits.cols());
    if mask_logits.rows() != n {
        return Err(Error::Shape(format!("{} mask rows for {n} queries", mask_logits.rows())));
    }
    let hw = mask_logits.cols();
    let probs: Vec<f64> = mask_logits.data.iter().map(|&x| sigmoid_scalar(x)).collect();
    // Focal cost per pixel for target 1 and 0, so each pair is a masked sum.
    let mut pos = vec![0.0; n * hw];
    let mut neg = vec![0.0; n * hw];
    for (k, &x) in mask_logits.data.iter().enumerate() {
        let p = probs[k];
        pos[k] = FOCAL_ALPHA * (1.0 - p).powi(2) * bce_with_logits_scalar(x, 1.0);
        neg[k] = (1.0 - FOCAL_ALPHA) * p.powi(2) * bce_with_logits_scalar(x, 0.0);
    }
    let neg_sum: Vec<f64> = (0..n).map(|q| neg[q * hw..(q + 1) * hw].iter().sum()).collect();
    let p_sum: Vec<f64> = (0..n).map(|q| probs[q * hw..(q + 1) * hw].iter().sum()).collect();
    let mut cost = vec![0.0; gt.len() * n];
    for (gi, seg) in gt.iter().enumerate() {
        if seg.mask.len() != hw {
            return Err(Error::Shape(format!("gt mask has {} pixels, predictions {hw}", seg.mask.len())));
        }
        if seg.class_index >= c {
            return Err(Error::Invalid(format!("gt class column {} outside head of width {c}", seg.class_index)));
        }
        let g_sum = seg.mask.iter().filter(|&&m| m).count() as f64;
        for q in 0..n {
            let (mut focal, mut inter) = (neg_sum[q], 0.0);
            for (k, &m) in seg.mask.iter().enumerate() {
                if m {
                    let i = q * hw + k;
                    focal += pos[i] - neg[i];
                    inter += probs[i];
                }
            }
            focal /= hw as f64;
            let dice = 1.0 - (2.0 * inter + 1.0) / (p_sum[q] + g_sum + 1.0);
            let cls = 1.0 - sigmoid_scalar(class_logits.data[q * c + seg.class_index]);
            cost[gi * n + q] = w.class * cls + w.focal * focal + w.dice * dice;
        }
    }
    Ok(cost)
}

pub fn hungarian_match(class_logits: &Tensor, mask_logits: &Tensor, gt: &[GtSegment], w: CostWeights) -> Result<Assignment> {
    let n = class_logits.rows();
    if gt.len() > n {
        return Err(Error::Invalid(format!("{} ground-truth segments exceed {n} queries", gt.len())));
    }
    let cost = match_cost(class_logits, mask_logits, gt, w)?;
    let cols_of = solve_assignment(&cost, gt.len(), n)?;
    let pairs: Vec<(usize, usize)> = cols_of.iter().enumerate().map(|(g, &q)| (q, g)).collect();
    let mut used = vec![false; n];
    for &(q, _) in &pairs {
        used[q] = true;
    }
    let unmatched = (0..n).filter(|&q| !used[q]).collect();
    Ok(Assignment { pairs, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn rec(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, picked: &mut Vec<usize>, best: &mut f64) {
            if r == rows {
                let total: f64 = picked.iter().enumerate().map(|(i, &c)| cost[i * cols + c]).sum();
                if total < *best {
                    *best = total;
                }
                return;
            }
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    picked.push(c);
                    rec(cost, rows, cols, r + 1, used, picked, best);
                    picked.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, rows, cols, 0, &mut vec![false; cols], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn iou_fixtures() {
        let a = vec![true, true, false, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(iou(&[false; 4], &[false; 4]).unwrap(), 0.0);
        assert!(iou(&a, &[true]).is_err());
        // 4x4: a covers rows 0..2 (8 px), b covers columns 1..3 of rows 0..4 (8 px):
        // overlap 4, union 12.
        let a: Vec<bool> = (0..16).map(|i| i / 4 < 2).collect();
        let b: Vec<bool> = (0..16).map(|i| (1..3).contains(&(i % 4))).collect();
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_optimum() {
        let cost = [1.0, 2.0, 2.0, 1.0];
        let cols = solve_assignment(&cost, 2, 2).unwrap();
        assert_eq!(cols, vec![0, 1]);
        assert_eq!(assignment_cost(&cost, 2, &cols), 2.0);
    }

    #[test]
    fn exact_mask_and_class_wins() {
        let hw = 16;
        let gt_mask: Vec<bool> = (0..hw).map(|i| i < 6).collect();
        let good: Vec<f64> = gt_mask.iter().map(|&m| if m { 8.0 } else { -8.0 }).collect();
        let bad: Vec<f64> = gt_mask.iter().map(|&m| if m { -8.0 } else { 8.0 }).collect();
        let mask_logits = Tensor::new(vec![2, hw], bad.into_iter().chain(good).collect());
        let class_logits = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, -5.0, 6.0, -5.0]);
        let gt = vec![GtSegment { class_index: 1, mask: gt_mask }];
        let a = hungarian_match(&class_logits, &mask_logits, &gt, CostWeights::default()).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched, vec![0]);
        let too_many = vec![gt[0].clone(); 3];
        assert!(hungarian_match(&class_logits, &mask_logits, &too_many, CostWeights::default()).is_err());
    }

    #[test]
    fn empty_gt_leaves_all_unmatched() {
        let a = hungarian_match(&Tensor::zeros(vec![3, 2]), &Tensor::zeros(vec![3, 4]), &[], CostWeights::default()).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched, vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn solver_equals_brute_force(rows in 1usize..=6, extra in 0usize..=2, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let cols = (rows + extra).min(6);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
            let assign = solve_assignment(&cost, rows, cols).unwrap();
            let mut seen = assign.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), rows);
            prop_assert_eq!(assignment_cost(&cost, cols, &assign), brute_min(&cost, rows, cols));
        }

        #[test]
        fn iou_symmetric(a in proptest::collection::vec(any::<bool>(), 16), b in proptest::collection::vec(any::<bool>(), 16)) {
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            let v = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            if a.iter().any(|&x| x) || b.iter().any(|&x| x) {
                prop_assert_eq!(v == 1.0, a == b);
            }
        }
    }
}
