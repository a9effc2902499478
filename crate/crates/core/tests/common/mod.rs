//! Oracles and measurement routines shared by the integration tests.

#![allow(dead_code)]

use candle::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidground::config::LossConfig;
use vidground::geometry::{box_giou, box_iou, temporal_iou, viou, BBox, TemporalSpan, Tube};
use vidground::losses::{entity_nll, loss_box, loss_time, positive_weights};
use vidground::query::{roi_align, QueryRegionBank};

pub const GRAD_EPS: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with an absolute floor for near-zero gradients.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if s < 1e-8 {
        d
    } else {
        d / s
    }
}

/// Analytic and numerical gradient of `f` at `x`.
pub fn check(x: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let dev = Device::Cpu;
    let var = Var::from_tensor(&Tensor::from_vec(x.to_vec(), shape, &dev).unwrap()).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let eval = |v: &[f64]| {
        let t = Tensor::from_vec(v.to_vec(), shape, &dev).unwrap();
        f(&t).to_scalar::<f64>().unwrap()
    };
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += GRAD_EPS;
            m[i] -= GRAD_EPS;
            (eval(&p) - eval(&m)) / (2.0 * GRAD_EPS)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-3
}

pub fn corners(b: &[f64]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.random_range(0.1..0.5);
    let h = rng.random_range(0.1..0.5);
    [rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h]
}

/// No coordinate, edge or overlap extent sits on a kink.
fn smooth_pair(p: &[f64], g: &[f64]) -> bool {
    let (a, b) = (corners(p), corners(g));
    let l1_ok = p.iter().zip(g).all(|(x, y)| !near(*x, *y));
    let edges_ok = (0..4).all(|k| !near(a[k], b[k]));
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    l1_ok && edges_ok && !near(iw, 0.0) && !near(ih, 0.0)
}

/// Worst gradient error of the box loss over `instances` random pairs.
pub fn grad_loss_box(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let weights = LossConfig::default();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let g = rng.random_range(1..4);
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for _ in 0..g {
            pred.extend(random_box(&mut rng));
            gt.extend(random_box(&mut rng));
        }
        let ok = (0..g).all(|k| smooth_pair(&pred[4 * k..4 * k + 4], &gt[4 * k..4 * k + 4]));
        if !ok {
            continue;
        }
        let gt_t = Tensor::from_vec(gt.clone(), (g, 4), &Device::Cpu).unwrap();
        let err = check(&pred, &[g, 4], |p| {
            let (giou, l1) = loss_box(p, &gt_t, &weights).unwrap();
            (giou + l1).unwrap()
        });
        worst = worst.max(err);
        done += 1;
    }
    worst
}

pub fn grad_loss_time(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let t = rng.random_range(2..25);
        let s = rng.random_range(0..t);
        let e = rng.random_range(s..t);
        let weights = LossConfig {
            time_smoothing: if k % 2 == 0 { 0.0 } else { rng.random_range(0.5..2.0) },
            ..Default::default()
        };
        let x: Vec<f64> = (0..2 * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let span = TemporalSpan::new(s, e).unwrap();
        let err = check(&x, &[2, t], |v| {
            loss_time(&v.get(0).unwrap(), &v.get(1).unwrap(), span, &weights).unwrap()
        });
        worst = worst.max(err);
    }
    worst
}

pub fn grad_loss_entity(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let (g, l, c) = (rng.random_range(1..4), rng.random_range(2..9), rng.random_range(2..9));
        let s = rng.random_range(0..l);
        let e = rng.random_range(s..l);
        let pw = Tensor::new(positive_weights(&[(s, e)], l), &Device::Cpu).unwrap();
        let normalize = k % 4 != 0;
        let tau = if normalize { 0.07 } else { 1.0 };
        let anchors: Vec<f64> = (0..g * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let words: Vec<f64> = (0..l * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_t = Tensor::from_vec(words.clone(), (l, c), &Device::Cpu).unwrap();
        let a_t = Tensor::from_vec(anchors.clone(), (g, c), &Device::Cpu).unwrap();
        // both arguments carry gradient
        let ea = check(&anchors, &[g, c], |a| entity_nll(a, &w_t, &pw, tau, normalize).unwrap());
        let ew = check(&words, &[l, c], |w| entity_nll(&a_t, w, &pw, tau, normalize).unwrap());
        worst = worst.max(ea).max(ew);
    }
    worst
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sample grid coordinates of a box side, as `roi_align` computes them.
fn sample_coords(lo: f64, hi: f64, cells: usize, bins: usize, samples: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..bins {
        for s in 0..samples {
            let f = (p as f64 + (s as f64 + 0.5) / samples as f64) / bins as f64;
            out.push((lo + (hi - lo) * f) * cells as f64 - 0.5);
        }
    }
    out
}

fn smooth_region(raw: &[f64], h: usize, w: usize, bins: usize, samples: usize) -> bool {
    let b: Vec<f64> = raw.iter().map(|&v| sigmoid(v)).collect();
    let c = corners(&b);
    if c.iter().any(|&v| v < 1e-3 || v > 1.0 - 1e-3) {
        return false;
    }
    let xs = sample_coords(c[0], c[2], w, bins, samples);
    let ys = sample_coords(c[1], c[3], h, bins, samples);
    let cell_ok = |g: &f64, n: usize| {
        let frac = g - g.floor();
        *g > 1e-3 && *g < n as f64 - 1.0 - 1e-3 && frac > 1e-3 && frac < 1.0 - 1e-3
    };
    xs.iter().all(|g| cell_ok(g, w)) && ys.iter().all(|g| cell_ok(g, h))
}

pub fn grad_roi_features(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (h, w, c) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..3));
        let bins = rng.random_range(1..4);
        let samples = rng.random_range(1..3);
        let n = rng.random_range(1..3);
        let boxes: Vec<f64> = (0..n).flat_map(|_| random_box(&mut rng)).collect();
        let boxes = Tensor::from_vec(boxes, (n, 4), &Device::Cpu).unwrap();
        let grid: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj: Vec<f64> = (0..n * bins * bins * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = Tensor::from_vec(proj, (1, 1, n, bins, bins, c), &Device::Cpu).unwrap();
        let err = check(&grid, &[1, 1, h, w, c], |g| {
            roi_align(g, &boxes, bins, samples).unwrap().mul(&proj).unwrap().sum_all().unwrap()
        });
        worst = worst.max(err);
    }
    worst
}

pub fn grad_roi_regions(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let (h, w, c) = (rng.random_range(3..7), rng.random_range(3..7), 2);
        let bins = rng.random_range(1..4);
        let samples = rng.random_range(1..3);
        let b = random_box(&mut rng);
        let raw: Vec<f64> = b.iter().map(|v| (v / (1.0 - v)).ln()).collect();
        if !smooth_region(&raw, h, w, bins, samples) {
            continue;
        }
        let grid: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = Tensor::from_vec(grid, (1, 1, h, w, c), &Device::Cpu).unwrap();
        let proj: Vec<f64> = (0..bins * bins * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = Tensor::from_vec(proj, (1, 1, 1, bins, bins, c), &Device::Cpu).unwrap();
        let err = check(&raw, &[1, 4], |r| {
            let boxes = QueryRegionBank::from_raw(r.clone()).boxes().unwrap();
            roi_align(&grid, &boxes, bins, samples).unwrap().mul(&proj).unwrap().sum_all().unwrap()
        });
        worst = worst.max(err);
        done += 1;
    }
    worst
}

/// Raster resolution of the IoU oracle: cells per unit length.
pub const RASTER: usize = 20_000;

fn cell_range(lo: f64, hi: f64) -> (i64, i64) {
    // cells whose centers (k + 0.5) / RASTER fall inside [lo, hi)
    let r = RASTER as f64;
    ((lo * r - 0.5).ceil() as i64, (hi * r - 0.5).ceil() as i64)
}

/// Cell counts of `a`, `b`, `a ∩ b` and their enclosing box, row by row.
fn raster_counts(a: &BBox, b: &BBox) -> (f64, f64, f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let (ex1, ey1, ex2, ey2) = (ax1.min(bx1), ay1.min(by1), ax2.max(bx2), ay2.max(by2));
    let (ra, rb, re) = (cell_range(ax1, ax2), cell_range(bx1, bx2), cell_range(ex1, ex2));
    let (ya, yb) = (cell_range(ay1, ay2), cell_range(by1, by2));
    let (y0, y1) = cell_range(ey1, ey2);
    let (mut na, mut nb, mut ni, mut ne) = (0u64, 0u64, 0u64, 0u64);
    let len = |r: (i64, i64)| (r.1 - r.0).max(0) as u64;
    for row in y0..y1 {
        let in_a = row >= ya.0 && row < ya.1;
        let in_b = row >= yb.0 && row < yb.1;
        ne += len(re);
        if in_a {
            na += len(ra);
        }
        if in_b {
            nb += len(rb);
        }
        if in_a && in_b {
            ni += len((ra.0.max(rb.0), ra.1.min(rb.1)));
        }
    }
    (na as f64, nb as f64, ni as f64, ne as f64)
}

pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let (na, nb, ni, _) = raster_counts(a, b);
    ni / (na + nb - ni)
}

pub fn raster_giou(a: &BBox, b: &BBox) -> f64 {
    let (na, nb, ni, ne) = raster_counts(a, b);
    let u = na + nb - ni;
    ni / u - (ne - u) / ne
}

/// A random box inside the unit frame, sides in `[0.05, 0.6]`.
pub fn frame_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.05..0.6);
    let h = rng.random_range(0.05..0.6);
    BBox::new(rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h)
}

/// Worst `|box_iou - raster|` and `|box_giou - raster|` over random pairs;
/// one pair in four is a jittered copy so high-overlap cases are covered.
pub fn box_metric_oracle(pairs: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wi, mut wg) = (0f64, 0f64);
    for k in 0..pairs {
        let a = frame_box(&mut rng);
        let b = if k % 4 == 0 {
            let j = BBox::new(
                a.cx + rng.random_range(-0.02..0.02),
                a.cy + rng.random_range(-0.02..0.02),
                a.w * rng.random_range(0.9..1.1),
                a.h * rng.random_range(0.9..1.1),
            );
            j.clipped()
        } else {
            frame_box(&mut rng)
        };
        wi = wi.max((box_iou(&a, &b) - raster_iou(&a, &b)).abs());
        wg = wg.max((box_giou(&a, &b) - raster_giou(&a, &b)).abs());
    }
    (wi, wg)
}

/// Random tube over `[s, e]` inside `t` frames.
pub fn random_tube(rng: &mut ChaCha8Rng, t: usize) -> Tube {
    let s = rng.random_range(0..t);
    let e = rng.random_range(s..t);
    let boxes = (s..=e).map(|_| frame_box(rng)).collect();
    Tube::new(TemporalSpan::new(s, e).unwrap(), boxes).unwrap()
}

/// vIoU by enumerating every frame index.
pub fn viou_oracle(pred: &Tube, gt: &Tube, frames: usize) -> f64 {
    let mut union = 0usize;
    let mut sum = 0.0;
    for t in 0..frames {
        let (p, g) = (pred.get(t), gt.get(t));
        if p.is_some() || g.is_some() {
            union += 1;
        }
        if let (Some(p), Some(g)) = (p, g) {
            sum += box_iou(p, g);
        }
    }
    sum / union as f64
}

pub fn tiou_oracle(a: &TemporalSpan, b: &TemporalSpan, frames: usize) -> f64 {
    let inter = (0..frames).filter(|&t| a.contains(t) && b.contains(t)).count();
    let union = (0..frames).filter(|&t| a.contains(t) || b.contains(t)).count();
    inter as f64 / union as f64
}

/// Mismatches of `viou` and `temporal_iou` against frame enumeration.
pub fn temporal_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let t = rng.random_range(1..40);
        let (p, g) = (random_tube(&mut rng, t), random_tube(&mut rng, t));
        if viou(&p, &g) != viou_oracle(&p, &g, t) {
            bad += 1;
        }
        if temporal_iou(&p.span(), &g.span()) != tiou_oracle(&p.span(), &g.span(), t) {
            bad += 1;
        }
    }
    bad
}

/// Worst relative change of GIoU when both boxes are scaled about the origin.
pub fn giou_scale_invariance(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (a, b) = (frame_box(&mut rng), frame_box(&mut rng));
        let s = rng.random_range(0.1..10.0);
        let g0 = box_giou(&a, &b);
        let g1 = box_giou(&a.scaled(s), &b.scaled(s));
        worst = worst.max((g0 - g1).abs());
    }
    worst
}

/// Lexicographically first minimum-cost injective assignment of targets to
/// queries, by enumeration. `cost[query][target]`.
pub fn brute_force_assign(cost: &[Vec<f64>]) -> Vec<usize> {
    let (n, k) = (cost.len(), cost[0].len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    let scale = cost.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * k as f64;
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn rec(
        cost: &[Vec<f64>],
        current: &mut Vec<usize>,
        used: &mut [bool],
        acc: f64,
        tol: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let k = cost[0].len();
        if current.len() == k {
            // enumeration order is lexicographic: only strict improvements replace
            if best.as_ref().is_none_or(|(b, _)| acc < *b - tol) {
                *best = Some((acc, current.clone()));
            }
            return;
        }
        let j = current.len();
        for q in 0..cost.len() {
            if !used[q] {
                used[q] = true;
                current.push(q);
                rec(cost, current, used, acc + cost[q][j], tol, best);
                current.pop();
                used[q] = false;
            }
        }
    }
    rec(cost, &mut current, &mut used, 0.0, tol, &mut best);
    best.expect("k <= n").1
}

/// Random `N×K` cost matrix, `K ≤ N ≤ 6`; even cases use small integers so
/// ties are common.
pub fn random_cost(rng: &mut ChaCha8Rng, case: usize) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=6);
    let k = rng.random_range(1..=n);
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| if case % 2 == 0 { rng.random_range(0..4) as f64 } else { rng.random_range(-5.0..5.0) })
                .collect()
        })
        .collect()
}

pub fn matching_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .filter(|&c| {
            let cost = random_cost(&mut rng, c);
            vidground::matching::assign(&cost).unwrap() != brute_force_assign(&cost)
        })
        .count()
}

/// Random non-negative loss weights for identity checks.
pub fn random_weights(rng: &mut ChaCha8Rng) -> LossConfig {
    LossConfig {
        giou: rng.random_range(0.0..5.0),
        l1: rng.random_range(0.0..10.0),
        kl: rng.random_range(0.0..10.0),
        entity: rng.random_range(0.0..3.0),
        tau: rng.random_range(0.03..1.0),
        background: rng.random_bool(0.5),
        ..Default::default()
    }
}

/// Small model and dataset that train in well under a second per step.
pub fn tiny_config(seed: u64) -> vidground::config::TrainConfig {
    // TOML integers are signed
    let seed = seed & i64::MAX as u64;
    let toml = format!(
        "[data]\nnum_frames = 4\nresolution = 32\n\
         [data.train]\nkind = \"synth\"\nnum_videos = 4\nseed = {seed}\n\
         [model]\ndim = 16\nnum_queries = 4\n\
         [encoder]\nlayers = 1\nheads = 2\nffn_dim = 32\n\
         [decoder]\nlayers = 1\nheads = 2\nffn_dim = 32\n\
         [train]\nbatch_size = 2\nlr = 1e-3\nepochs = 1\neval_train = false\nseed = {seed}\n"
    );
    vidground::config::TrainConfig::from_toml_str(&toml).unwrap()
}
