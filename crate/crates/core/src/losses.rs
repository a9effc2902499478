//! Training objective.
//!
//! Per sample, the matched loss averages over annotated frames the matched
//! query's `-log σ(c)` and box loss, plus the temporal KL term on untrimmed
//! videos. Unmatched queries optionally receive a background term
//! `-log(1 - σ(c))`. The entity-aware contrastive loss pulls the matched
//! query's anchor towards the words of the subject phrase. The batch loss is
//! the mean of the per-sample totals `L_match + λ_entity · L_entity`.

use candle::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::decoder::{argmax, Predictions, SamplePredictions};
use crate::error::{Error, Result};
use crate::geometry::{TemporalSpan, Tube};
use crate::matching::{assign, boundary_target, match_cost, query_temporal_costs, FrameMatch, MatchResult};
use crate::nn::softplus;

/// Ground truth for one batch row.
#[derive(Clone, Debug)]
pub struct SampleTarget {
    pub tube: Tube,
    pub trimmed: bool,
    pub num_frames: usize,
    pub num_words: usize,
    /// Inclusive word ranges of the phrases naming the target.
    pub entities: Vec<(usize, usize)>,
}

/// Model tensors the loss reads.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub predictions: &'a Predictions,
    /// `B×T×N×C` per-query anchors for the contrastive loss.
    pub anchors: &'a Tensor,
    /// `B×L×C` fused text memory `H^Y`.
    pub words: &'a Tensor,
}

/// Itemized scalar losses; every term is a batch mean of per-sample values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    #[serde(rename = "match")]
    pub match_loss: f64,
    pub confidence: f64,
    pub giou: f64,
    pub l1: f64,
    pub time: f64,
    pub background: f64,
    pub entity: f64,
    /// `λ_entity` in effect (0 when the contrastive loss is disabled).
    pub entity_weight: f64,
}

impl LossReport {
    /// `total - (match + λ_entity · entity)`.
    pub fn identity_residual(&self) -> f64 {
        self.total - (self.match_loss + self.entity_weight * self.entity)
    }
}

/// Differentiable per-sample terms (scalar tensors).
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub total: Tensor,
    pub match_loss: Tensor,
    pub confidence: Tensor,
    pub giou: Tensor,
    pub l1: Tensor,
    pub time: Tensor,
    pub background: Tensor,
    pub entity: Tensor,
}

/// Row-wise GIoU of `G×4` `(cx, cy, w, h)` boxes.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let corners = |x: &Tensor| -> Result<[Tensor; 4]> {
        let cx = x.narrow(1, 0, 1)?;
        let cy = x.narrow(1, 1, 1)?;
        let hw = x.narrow(1, 2, 1)?.affine(0.5, 0.0)?;
        let hh = x.narrow(1, 3, 1)?.affine(0.5, 0.0)?;
        Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
    };
    let [ax1, ay1, ax2, ay2] = corners(a)?;
    let [bx1, by1, bx2, by2] = corners(b)?;
    let area = |x1: &Tensor, y1: &Tensor, x2: &Tensor, y2: &Tensor| -> Result<Tensor> { Ok(((x2 - x1)? * (y2 - y1)?)?) };
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area(&ax1, &ay1, &ax2, &ay2)? + area(&bx1, &by1, &bx2, &by2)?)? - &inter)?;
    let enclose = area(&ax1.minimum(&bx1)?, &ay1.minimum(&by1)?, &ax2.maximum(&bx2)?, &ay2.maximum(&by2)?)?;
    let iou = (&inter / &union)?;
    let giou = (iou - ((&enclose - &union)? / &enclose)?)?;
    Ok(giou.squeeze(1)?)
}

/// Mean over rows of `λ_giou (1 - GIoU)` and of `λ_L1 ‖b - b̂‖₁`.
pub fn loss_box(pred: &Tensor, gt: &Tensor, weights: &LossConfig) -> Result<(Tensor, Tensor)> {
    let giou = giou_tensor(pred, gt)?.affine(-weights.giou, weights.giou)?.mean_all()?;
    let l1 = (pred - gt)?.abs()?.sum(1)?.mean_all()?.affine(weights.l1, 0.0)?;
    Ok((giou, l1))
}

/// `λ_KL [KL(q_s ‖ softmax(start)) + KL(q_e ‖ softmax(end))]` over `T` logits.
pub fn loss_time(start: &Tensor, end: &Tensor, gt: TemporalSpan, weights: &LossConfig) -> Result<Tensor> {
    let t = start.dims1()?;
    let kl = |logits: &Tensor, frame: usize| -> Result<Tensor> {
        let q = boundary_target(t, frame, weights.time_smoothing);
        let entropy: f64 = q.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();
        let q = Tensor::from_vec(q, t, logits.device())?;
        let logp = candle_nn::ops::log_softmax(logits, 0)?;
        Ok((q * logp)?.sum_all()?.affine(-1.0, entropy)?)
    };
    Ok((kl(start, gt.start_frame)? + kl(end, gt.end_frame)?)?.affine(weights.kl, 0.0)?)
}

/// Weighted mean over positive words of `-log softmax(a·w_k / τ)` over `L` words.
///
/// `anchors: G×C`, `words: L×C`; `positive_weights: L` is a probability
/// vector over the positive words. With `normalize`, rows are unit-normalized
/// first so the logits are cosine similarities over `τ`.
pub fn entity_nll(anchors: &Tensor, words: &Tensor, positive_weights: &Tensor, tau: f64, normalize: bool) -> Result<Tensor> {
    let (a, w) = if normalize {
        (unit_rows(anchors)?, unit_rows(words)?)
    } else {
        (anchors.clone(), words.clone())
    };
    let logits = (a.matmul(&w.t()?)? / tau)?;
    let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    Ok(logp.broadcast_mul(&positive_weights.unsqueeze(0)?)?.sum(1)?.mean_all()?.neg()?)
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Probability weight of each word: uniform over each span, uniform over spans.
pub fn positive_weights(entities: &[(usize, usize)], num_words: usize) -> Vec<f64> {
    let mut w = vec![0.0; num_words];
    for &(s, e) in entities {
        let share = 1.0 / (entities.len() * (e - s + 1)) as f64;
        for v in &mut w[s..=e] {
            *v += share;
        }
    }
    w
}

/// Match every annotated frame of one sample against detached predictions.
pub fn match_sample(pred: &SamplePredictions, target: &SampleTarget, weights: &LossConfig) -> Result<MatchResult> {
    let temporal = if target.trimmed {
        None
    } else {
        Some(query_temporal_costs(&pred.start_logits, &pred.end_logits, target.tube.span(), weights.time_smoothing))
    };
    let frames = target
        .tube
        .iter()
        .map(|(t, gt)| {
            let cost = match_cost(&pred.confidence[t], &pred.boxes[t], gt, weights, temporal.as_deref());
            let cost: Vec<Vec<f64>> = cost.into_iter().map(|c| vec![c]).collect();
            Ok(FrameMatch {
                frame: t,
                queries: assign(&cost)?,
                cost,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MatchResult { frames })
}

fn scalar(v: f64, device: &Device) -> Result<Tensor> {
    Ok(Tensor::new(v, device)?)
}

fn index(v: Vec<u32>, device: &Device) -> Result<Tensor> {
    let n = v.len();
    Ok(Tensor::from_vec(v, n, device)?)
}

/// Loss of batch row `b` given its match.
pub fn loss_sample(
    inputs: &LossInputs,
    b: usize,
    target: &SampleTarget,
    matched: &MatchResult,
    detached: &SamplePredictions,
    weights: &LossConfig,
    ecl: bool,
) -> Result<SampleLoss> {
    let p = inputs.predictions;
    let device = p.confidence.device();
    let (t, n) = (target.num_frames, p.confidence.dims()[2]);
    let conf = p.confidence.get(b)?.narrow(0, 0, t)?.flatten_all()?;
    let boxes = p.boxes.get(b)?.narrow(0, 0, t)?.reshape((t * n, 4))?;
    let flat: Vec<u32> = matched.frames.iter().map(|f| (f.frame * n + f.queries[0]) as u32).collect();
    let idx = index(flat.clone(), device)?;

    let confidence = softplus(&conf.index_select(&idx, 0)?.neg()?)?.mean_all()?;
    let gt: Vec<f64> = target.tube.boxes().iter().flat_map(|b| b.to_array()).collect();
    let gt = Tensor::from_vec(gt, (flat.len(), 4), device)?;
    let (giou, l1) = loss_box(&boxes.index_select(&idx, 0)?, &gt, weights)?;

    let time = if target.trimmed {
        scalar(0.0, device)?
    } else {
        let sel: Vec<u32> = (0..t)
            .map(|f| {
                let i = matched.query_at(f).unwrap_or_else(|| argmax(&detached.confidence[f]));
                (f * n + i) as u32
            })
            .collect();
        let logits = p.time_logits.get(b)?.narrow(0, 0, t)?.reshape((t * n, 2))?.index_select(&index(sel, device)?, 0)?;
        let start = logits.narrow(1, 0, 1)?.squeeze(1)?;
        let end = logits.narrow(1, 1, 1)?.squeeze(1)?;
        loss_time(&start, &end, target.tube.span(), weights)?
    };

    let background = if weights.background && t * n > flat.len() {
        let mut mask = vec![1.0; t * n];
        for &i in &flat {
            mask[i as usize] = 0.0;
        }
        let count = (t * n - flat.len()) as f64;
        let mask = Tensor::from_vec(mask, t * n, device)?;
        (softplus(&conf)? * mask)?.sum_all()?.affine(1.0 / count, 0.0)?
    } else {
        scalar(0.0, device)?
    };

    let entity = if ecl && !target.entities.is_empty() {
        let c = inputs.anchors.dims()[3];
        let anchors = inputs.anchors.get(b)?.narrow(0, 0, t)?.reshape((t * n, c))?.index_select(&idx, 0)?;
        let words = inputs.words.get(b)?.narrow(0, 0, target.num_words)?;
        let w = Tensor::from_vec(positive_weights(&target.entities, target.num_words), target.num_words, device)?;
        entity_nll(&anchors, &words, &w, weights.tau, weights.entity_normalize)?
    } else {
        scalar(0.0, device)?
    };

    let match_loss = (((&confidence + &giou)? + &l1)? + &time)?;
    let match_loss = (match_loss + &background)?;
    let entity_weight = if ecl { weights.entity } else { 0.0 };
    let total = (&match_loss + entity.affine(entity_weight, 0.0)?)?;
    Ok(SampleLoss {
        total,
        match_loss,
        confidence,
        giou,
        l1,
        time,
        background,
        entity,
    })
}

/// Batch loss: mean of per-sample totals, with the itemized report and the
/// per-sample matches.
pub fn loss_total(
    inputs: &LossInputs,
    targets: &[SampleTarget],
    weights: &LossConfig,
    ecl: bool,
) -> Result<(Tensor, LossReport, Vec<MatchResult>)> {
    if targets.is_empty() || targets.len() != inputs.predictions.confidence.dims()[0] {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {}",
            targets.len(),
            inputs.predictions.confidence.dims()[0]
        )));
    }
    let mut samples = Vec::with_capacity(targets.len());
    let mut matches = Vec::with_capacity(targets.len());
    for (b, target) in targets.iter().enumerate() {
        let detached = SamplePredictions::from_batch(inputs.predictions, b, target.num_frames)?;
        let m = match_sample(&detached, target, weights)?;
        samples.push(loss_sample(inputs, b, target, &m, &detached, weights, ecl)?);
        matches.push(m);
    }
    let mean = |f: fn(&SampleLoss) -> &Tensor| -> Result<Tensor> {
        let parts: Vec<Tensor> = samples.iter().map(|s| f(s).reshape(1)).collect::<candle::Result<_>>()?;
        Ok(Tensor::cat(&parts, 0)?.mean_all()?)
    };
    let total = mean(|s| &s.total)?;
    let value = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let report = LossReport {
        total: value(total.clone())?,
        match_loss: value(mean(|s| &s.match_loss)?)?,
        confidence: value(mean(|s| &s.confidence)?)?,
        giou: value(mean(|s| &s.giou)?)?,
        l1: value(mean(|s| &s.l1)?)?,
        time: value(mean(|s| &s.time)?)?,
        background: value(mean(|s| &s.background)?)?,
        entity: value(mean(|s| &s.entity)?)?,
        entity_weight: if ecl { weights.entity } else { 0.0 },
    };
    Ok((total, report, matches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_giou, BBox};

    fn dev() -> Device {
        Device::Cpu
    }

    fn boxes(b: &[BBox]) -> Tensor {
        crate::query::boxes_tensor(b, &dev()).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn giou_tensor_matches_scalar() {
        let a = [BBox::new(0.3, 0.4, 0.2, 0.3), BBox::new(0.5, 0.5, 0.4, 0.4)];
        let b = [BBox::new(0.35, 0.45, 0.25, 0.2), BBox::new(0.1, 0.1, 0.1, 0.1)];
        let g: Vec<f64> = giou_tensor(&boxes(&a), &boxes(&b)).unwrap().to_vec1().unwrap();
        for i in 0..2 {
            assert!((g[i] - box_giou(&a[i], &b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn box_loss_zero_on_match_and_linear_in_weights() {
        let a = boxes(&[BBox::new(0.3, 0.4, 0.2, 0.3)]);
        let w = LossConfig::default();
        let (g, l) = loss_box(&a, &a, &w).unwrap();
        assert!(value(&g).abs() < 1e-12 && value(&l).abs() < 1e-12);
        let b = boxes(&[BBox::new(0.32, 0.41, 0.25, 0.2)]);
        let (_, l1) = loss_box(&a, &b, &w).unwrap();
        let (_, l2) = loss_box(&a, &b, &LossConfig { l1: 10.0, ..w }).unwrap();
        assert!((2.0 * value(&l1) - value(&l2)).abs() < 1e-15);
    }

    #[test]
    fn time_loss_closed_forms() {
        let w = LossConfig::default();
        let t = 7;
        let uniform = Tensor::zeros(t, DType::F64, &dev()).unwrap();
        let span = TemporalSpan::new(2, 5).unwrap();
        let l = value(&loss_time(&uniform, &uniform, span, &w).unwrap());
        assert!((l - w.kl * 2.0 * (t as f64).ln()).abs() < 1e-12);
        let peak = |f: usize| Tensor::from_vec((0..t).map(|i| if i == f { 100.0 } else { 0.0 }).collect::<Vec<f64>>(), t, &dev()).unwrap();
        assert!(value(&loss_time(&peak(2), &peak(5), span, &w).unwrap()) < 1e-12);
    }

    #[test]
    fn entity_fixture_values() {
        let words = Tensor::new(&[[2.0, 0.0], [1.0, 0.0], [0.0, 0.0]], &dev()).unwrap();
        let anchor = Tensor::new(&[[1.0, 0.0]], &dev()).unwrap();
        let pos = Tensor::new(&[1.0, 0.0, 0.0], &dev()).unwrap();
        let l = value(&entity_nll(&anchor, &words, &pos, 1.0, false).unwrap());
        let e = std::f64::consts::E;
        assert!((l - (-(e * e / (e * e + e + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.4076).abs() < 1e-4);
        let single = value(&entity_nll(&anchor, &words.narrow(0, 0, 1).unwrap(), &Tensor::new(&[1.0], &dev()).unwrap(), 0.07, true).unwrap());
        assert!(single.abs() < 1e-12);
        let flat = Tensor::new(&[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], &dev()).unwrap();
        let pos4 = Tensor::new(&[0.0, 0.5, 0.5, 0.0], &dev()).unwrap();
        let l4 = value(&entity_nll(&anchor, &flat, &pos4, 0.07, true).unwrap());
        assert!((l4 - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn positive_weights_average_words_then_entities() {
        let w = positive_weights(&[(1, 2), (4, 4)], 6);
        assert_eq!(w, vec![0.0, 0.25, 0.25, 0.0, 0.5, 0.0]);
    }

    fn fixture(c: [[f64; 2]; 2], b: [[BBox; 2]; 2]) -> (Predictions, Tensor, Tensor) {
        let conf = Tensor::new(&[c], &dev()).unwrap();
        let bx: Vec<f64> = b.iter().flatten().flat_map(|x| x.to_array()).collect();
        let preds = Predictions {
            boxes: Tensor::from_vec(bx, (1, 2, 2, 4), &dev()).unwrap(),
            time_logits: Tensor::zeros((1, 2, 2, 2), DType::F64, &dev()).unwrap(),
            confidence: conf,
        };
        let anchors = Tensor::ones((1, 2, 2, 4), DType::F64, &dev()).unwrap();
        let words = Tensor::ones((1, 3, 4), DType::F64, &dev()).unwrap();
        (preds, anchors, words)
    }

    #[test]
    fn two_frame_two_query_hand_evaluation() {
        let gt0 = BBox::new(0.4, 0.4, 0.2, 0.2);
        let gt1 = BBox::new(0.6, 0.5, 0.2, 0.3);
        let near0 = BBox::new(0.42, 0.41, 0.2, 0.22);
        let far = BBox::new(0.8, 0.8, 0.1, 0.1);
        let near1 = BBox::new(0.6, 0.52, 0.18, 0.3);
        let c = [[0.5, 1.0], [-0.3, 2.0]];
        let (preds, anchors, words) = fixture(c, [[near0, far], [far, near1]]);
        let tube = Tube::new(TemporalSpan::full(2).unwrap(), vec![gt0, gt1]).unwrap();
        let target = SampleTarget { tube, trimmed: true, num_frames: 2, num_words: 3, entities: vec![(0, 0)] };
        let w = LossConfig::default();
        let inputs = LossInputs { predictions: &preds, anchors: &anchors, words: &words };
        let (_, report, matches) = loss_total(&inputs, &[target], &w, false).unwrap();
        assert_eq!(matches[0].frames.iter().map(|f| f.queries[0]).collect::<Vec<_>>(), vec![0, 1]);
        let sp = crate::nn::softplus_f64;
        let bl = |p: &BBox, g: &BBox| 2.0 * (1.0 - box_giou(p, g)) + 5.0 * p.l1_distance(g);
        let matched = (sp(-0.5) + bl(&near0, &gt0) + sp(-2.0) + bl(&near1, &gt1)) / 2.0;
        let background = (sp(1.0) + sp(-0.3)) / 2.0;
        assert!((report.match_loss - matched - background).abs() < 1e-12);
        assert!((report.background - background).abs() < 1e-12);
        assert!(report.identity_residual().abs() < 1e-12);
        assert_eq!(report.entity, 0.0);
    }
}
