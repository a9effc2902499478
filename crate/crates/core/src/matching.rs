//! Query-to-target matching.
//!
//! The matching cost of query `i` against a ground-truth box is
//! `-log σ(c_i) + λ_giou (1 - GIoU) + λ_L1 ‖b_i - b̂‖₁`, plus, on untrimmed
//! videos, `λ_KL` times the KL divergence between the query's own start/end
//! distributions and the ground-truth boundaries. With one target per frame
//! the cheapest query wins; with several, an optimal one-to-one assignment is
//! computed with the Hungarian algorithm. Ties always go to the
//! lexicographically smallest assignment.

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::geometry::{box_giou, BBox, TemporalSpan};
use crate::nn::softplus_f64;

/// Costs of every query against one ground-truth box.
///
/// `temporal`: per-query KL cost (already summed over start and end, before
/// `λ_KL`), only for untrimmed videos.
pub fn match_cost(
    confidence: &[f64],
    boxes: &[BBox],
    gt: &BBox,
    weights: &LossConfig,
    temporal: Option<&[f64]>,
) -> Vec<f64> {
    confidence
        .iter()
        .zip(boxes)
        .enumerate()
        .map(|(i, (&c, b))| {
            let mut cost = softplus_f64(-c) + weights.giou * (1.0 - box_giou(b, gt)) + weights.l1 * b.l1_distance(gt);
            if let Some(kl) = temporal {
                cost += weights.kl * kl[i];
            }
            cost
        })
        .collect()
}

/// One-hot target at `frame` over `len` frames, optionally smoothed by a
/// Gaussian of width `sigma` and renormalized.
pub fn boundary_target(len: usize, frame: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return (0..len).map(|t| (t == frame) as u8 as f64).collect();
    }
    let w: Vec<f64> = (0..len)
        .map(|t| (-((t as f64 - frame as f64).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// `KL(target ‖ softmax(logits))`; zero-mass target entries contribute nothing.
pub fn kl_from_logits(target: &[f64], logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    target
        .iter()
        .zip(logits)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, z)| q * (q.ln() - (z - lse)))
        .sum()
}

/// Per-query temporal cost: start KL plus end KL of each query slot's own
/// distribution over the `T` frames. `start[t][i]`, `end[t][i]`.
pub fn query_temporal_costs(start: &[Vec<f64>], end: &[Vec<f64>], gt: TemporalSpan, sigma: f64) -> Vec<f64> {
    let t = start.len();
    let n = start.first().map_or(0, Vec::len);
    let ts = boundary_target(t, gt.start_frame, sigma);
    let te = boundary_target(t, gt.end_frame, sigma);
    (0..n)
        .map(|i| {
            let s: Vec<f64> = start.iter().map(|f| f[i]).collect();
            let e: Vec<f64> = end.iter().map(|f| f[i]).collect();
            kl_from_logits(&ts, &s) + kl_from_logits(&te, &e)
        })
        .collect()
}

/// Matched query per target on one frame, with the cost matrix `[query][target]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatch {
    pub frame: usize,
    pub queries: Vec<usize>,
    pub cost: Vec<Vec<f64>>,
}

/// Matches for every annotated frame of one sample.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MatchResult {
    pub frames: Vec<FrameMatch>,
}

impl MatchResult {
    /// Matched query of the first target on `frame`, if annotated.
    pub fn query_at(&self, frame: usize) -> Option<usize> {
        self.frames.iter().find(|f| f.frame == frame).map(|f| f.queries[0])
    }
}

/// Assign targets (columns of `cost[query][target]`) to distinct queries.
pub fn assign(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    let k = cost.first().map_or(0, Vec::len);
    if k == 0 {
        return Ok(Vec::new());
    }
    if n < k || cost.iter().any(|r| r.len() != k) {
        return Err(Error::Invalid(format!("cannot assign {k} targets to {n} queries")));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite matching cost".into()));
    }
    if k == 1 {
        let neg: Vec<f64> = cost.iter().map(|r| -r[0]).collect();
        return Ok(vec![crate::decoder::argmax(&neg)]);
    }
    // targets are rows of the transposed problem
    let t: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
    let (best, _) = hungarian(&t, &(0..k).collect::<Vec<_>>(), &[]);
    let scale = t.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * k as f64;
    let mut fixed: Vec<usize> = Vec::with_capacity(k);
    let mut used = vec![false; n];
    let mut spent = 0.0;
    for row in 0..k {
        let mut chosen = None;
        for q in (0..n).filter(|&q| !used[q]) {
            let mut cols: Vec<usize> = fixed.clone();
            cols.push(q);
            let rest: Vec<usize> = (row + 1..k).collect();
            let (sub, _) = hungarian(&t, &rest, &cols);
            if spent + t[row][q] + sub <= best + tol {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("an optimal completion always exists");
        spent += t[row][q];
        used[q] = true;
        fixed.push(q);
    }
    Ok(fixed)
}

/// Minimum-cost assignment of `rows` to distinct columns, avoiding `banned`
/// columns. Returns the cost and the column of each selected row.
fn hungarian(cost: &[Vec<f64>], rows: &[usize], banned: &[usize]) -> (f64, Vec<usize>) {
    let cols: Vec<usize> = (0..cost.first().map_or(0, Vec::len)).filter(|c| !banned.contains(c)).collect();
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    // potentials formulation, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..n).map(|i| cost[rows[i]][assignment[i]]).sum();
    (total, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_query_costs_nothing() {
        let gt = BBox::new(0.5, 0.5, 0.2, 0.3);
        let c = match_cost(&[60.0], &[gt], &gt, &LossConfig::default(), None);
        assert!(c[0].abs() < 1e-12);
    }

    #[test]
    fn good_box_beats_confident_miss() {
        let gt = BBox::new(0.3, 0.3, 0.2, 0.2);
        let far = BBox::new(0.8, 0.8, 0.1, 0.1);
        let logit99 = (0.99f64 / 0.01).ln();
        let c = match_cost(&[0.0, logit99], &[gt, far], &gt, &LossConfig::default(), None);
        // oracle: -ln 0.5 vs -ln 0.99 + 2 (1 - giou) + 5 l1
        let giou = box_giou(&far, &gt);
        let want_far = -(0.99f64).ln() + 2.0 * (1.0 - giou) + 5.0 * (0.5 + 0.5 + 0.1 + 0.1);
        assert!((c[0] - 2f64.ln()).abs() < 1e-12);
        assert!((c[1] - want_far).abs() < 1e-9);
        assert_eq!(assign(&c.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap(), vec![0]);
    }

    #[test]
    fn single_target_is_argmin_lowest_index_on_ties() {
        let cost = vec![vec![3.0], vec![1.0], vec![1.0]];
        assert_eq!(assign(&cost).unwrap(), vec![1]);
        assert_eq!(assign(&[vec![7.0]]).unwrap(), vec![0]);
    }

    #[test]
    fn ties_give_lexicographically_smallest_assignment() {
        let cost = vec![vec![1.0; 3]; 4];
        assert_eq!(assign(&cost).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_small_case() {
        // queries × targets
        let cost = vec![vec![4.0, 1.0], vec![2.0, 0.5], vec![3.0, 5.0]];
        // best: target 0 -> query 1 (2.0), target 1 -> query 0 (1.0)
        let a = assign(&cost).unwrap();
        assert_eq!(a, vec![1, 0]);
    }

    #[test]
    fn too_many_targets_is_an_error() {
        assert!(assign(&[vec![1.0, 2.0]]).is_err());
        assert!(assign(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let uniform = vec![0.0; 8];
        let target = boundary_target(8, 3, 0.0);
        assert!((kl_from_logits(&target, &uniform) - 8f64.ln()).abs() < 1e-12);
        let sharp: Vec<f64> = (0..8).map(|t| if t == 3 { 80.0 } else { 0.0 }).collect();
        assert!(kl_from_logits(&target, &sharp) < 1e-12);
        let smooth = boundary_target(9, 4, 1.5);
        assert!((smooth.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(crate::decoder::argmax(&smooth), 4);
    }
}
