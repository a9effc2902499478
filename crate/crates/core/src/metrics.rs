//! Dataset-level grounding metrics: `Accu.@η`, `m_IoU`, `m_tIoU`, `m_vIoU`
//! and `vIoU@θ`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou_checked, temporal_iou, viou, Tube};

/// Granularity of the `Accu.@η` trials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Each annotated ground-truth frame is one trial.
    #[default]
    PerFrame,
    /// Accuracy is computed per video and then averaged over videos.
    PerVideo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub accuracy_thresholds: Vec<f64>,
    pub viou_thresholds: Vec<f64>,
    pub mode: AccuracyMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            accuracy_thresholds: vec![0.4, 0.5, 0.6],
            viou_thresholds: vec![0.3, 0.5],
            mode: AccuracyMode::PerFrame,
        }
    }
}

/// A `(threshold, fraction)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdValue {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Vec<ThresholdValue>,
    pub m_iou: f64,
    pub m_tiou: f64,
    pub m_viou: f64,
    pub viou_at: Vec<ThresholdValue>,
    pub samples: usize,
    /// Frames whose IoU was scored 0 because both boxes were degenerate.
    pub degenerate_frames: usize,
}

impl MetricReport {
    pub fn accuracy_at(&self, threshold: f64) -> Option<f64> {
        lookup(&self.accuracy, threshold)
    }

    pub fn viou_at(&self, threshold: f64) -> Option<f64> {
        lookup(&self.viou_at, threshold)
    }

    /// `key=value` lines, one metric per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples={}", self.samples);
        for a in &self.accuracy {
            let _ = writeln!(out, "accu@{}={:.6}", a.threshold, a.value);
        }
        let _ = writeln!(out, "m_iou={:.6}", self.m_iou);
        let _ = writeln!(out, "m_tiou={:.6}", self.m_tiou);
        let _ = writeln!(out, "m_viou={:.6}", self.m_viou);
        for v in &self.viou_at {
            let _ = writeln!(out, "viou@{}={:.6}", v.threshold, v.value);
        }
        let _ = writeln!(out, "degenerate_frames={}", self.degenerate_frames);
        out
    }
}

fn lookup(values: &[ThresholdValue], threshold: f64) -> Option<f64> {
    values
        .iter()
        .find(|v| (v.threshold - threshold).abs() < 1e-12)
        .map(|v| v.value)
}

/// Fraction of values strictly greater than `eta`. Empty input scores 0.
pub fn accuracy_at(per_frame_ious: &[f64], eta: f64) -> f64 {
    if per_frame_ious.is_empty() {
        return 0.0;
    }
    per_frame_ious.iter().filter(|&&v| v > eta).count() as f64 / per_frame_ious.len() as f64
}

/// IoU of the prediction at every ground-truth frame; frames the prediction
/// does not cover score 0. Also returns the degenerate-frame count.
pub fn per_frame_ious(pred: &Tube, gt: &Tube) -> (Vec<f64>, usize) {
    let mut degenerate = 0;
    let ious = gt
        .iter()
        .map(|(t, g)| match pred.get(t) {
            Some(p) => {
                let o = box_iou_checked(p, g);
                degenerate += o.degenerate as usize;
                o.value
            }
            None => 0.0,
        })
        .collect();
    (ious, degenerate)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn aggregate(samples: &[(Tube, Tube)], config: &MetricConfig) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot aggregate metrics over zero samples".into()));
    }
    let mut degenerate_frames = 0;
    let per_sample: Vec<Vec<f64>> = samples
        .iter()
        .map(|(p, g)| {
            let (ious, d) = per_frame_ious(p, g);
            degenerate_frames += d;
            ious
        })
        .collect();
    let vious: Vec<f64> = samples.iter().map(|(p, g)| viou(p, g)).collect();

    let (accuracy, m_iou) = match config.mode {
        AccuracyMode::PerFrame => {
            let pooled: Vec<f64> = per_sample.iter().flatten().copied().collect();
            let acc = config
                .accuracy_thresholds
                .iter()
                .map(|&eta| ThresholdValue {
                    threshold: eta,
                    value: accuracy_at(&pooled, eta),
                })
                .collect();
            (acc, mean(pooled.iter().copied()))
        }
        AccuracyMode::PerVideo => {
            let acc = config
                .accuracy_thresholds
                .iter()
                .map(|&eta| ThresholdValue {
                    threshold: eta,
                    value: mean(per_sample.iter().map(|v| accuracy_at(v, eta))),
                })
                .collect();
            (acc, mean(per_sample.iter().map(|v| mean(v.iter().copied()))))
        }
    };

    let viou_at = config
        .viou_thresholds
        .iter()
        .map(|&theta| ThresholdValue {
            threshold: theta,
            value: accuracy_at(&vious, theta),
        })
        .collect();

    Ok(MetricReport {
        accuracy,
        m_iou,
        m_tiou: mean(samples.iter().map(|(p, g)| temporal_iou(&p.span(), &g.span()))),
        m_viou: mean(vious.iter().copied()),
        viou_at,
        samples: samples.len(),
        degenerate_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, TemporalSpan};

    fn tube(start: usize, end: usize, b: BBox) -> Tube {
        Tube::new(TemporalSpan::new(start, end).unwrap(), vec![b; end - start + 1]).unwrap()
    }

    #[test]
    fn accuracy_counts_strictly_greater() {
        assert_eq!(accuracy_at(&[1.0; 4], 0.5), 1.0);
        assert_eq!(accuracy_at(&[0.0; 4], 0.4), 0.0);
        assert!((accuracy_at(&[0.45, 0.55, 0.65], 0.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy_at(&[0.5], 0.5), 0.0);
    }

    #[test]
    fn perfect_sample_scores_one_everywhere() {
        let g = tube(0, 4, BBox::new(0.5, 0.5, 0.3, 0.3));
        let r = aggregate(&[(g.clone(), g)], &MetricConfig::default()).unwrap();
        assert!(r.accuracy.iter().all(|a| a.value == 1.0));
        assert!(r.viou_at.iter().all(|a| a.value == 1.0));
        assert_eq!((r.m_iou, r.m_tiou, r.m_viou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_spans_contribute_zero_viou() {
        let b = BBox::new(0.5, 0.5, 0.3, 0.3);
        let r = aggregate(&[(tube(0, 3, b), tube(5, 7, b))], &MetricConfig::default()).unwrap();
        assert_eq!(r.m_viou, 0.0);
        assert_eq!(r.m_iou, 0.0);
    }

    #[test]
    fn per_video_mode_averages_videos() {
        let b = BBox::new(0.5, 0.5, 0.3, 0.3);
        let off = BBox::new(0.1, 0.1, 0.05, 0.05);
        // video A: 1 frame, correct. video B: 3 frames, all wrong.
        let samples = vec![(tube(0, 0, b), tube(0, 0, b)), (tube(0, 2, off), tube(0, 2, b))];
        let frame = aggregate(&samples, &MetricConfig::default()).unwrap();
        let video = aggregate(
            &samples,
            &MetricConfig {
                mode: AccuracyMode::PerVideo,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(frame.accuracy_at(0.5), Some(0.25));
        assert_eq!(video.accuracy_at(0.5), Some(0.5));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(aggregate(&[], &MetricConfig::default()).is_err());
    }

    #[test]
    fn key_value_rendering() {
        let g = tube(0, 1, BBox::new(0.5, 0.5, 0.3, 0.3));
        let r = aggregate(&[(g.clone(), g)], &MetricConfig::default()).unwrap();
        let kv = r.to_key_values();
        assert!(kv.contains("accu@0.5=1.000000"));
        assert!(kv.contains("viou@0.3=1.000000"));
        assert!(kv.starts_with("samples=1\n"));
    }
}
