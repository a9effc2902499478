//! Query decoder and prediction heads.
//!
//! Each decoder block runs self-attention among the `N` queries of one frame,
//! cross-attention from every query to the whole fused memory (all frames and
//! all words), then a feed-forward layer. Three heads read the decoded
//! queries: a box MLP, a two-logit temporal head (start, end) and a scalar
//! confidence head used for matching and inference-time selection.

use candle::{Tensor, D};

use crate::config::{BoxMode, DecoderConfig};
use crate::encoder::FusedMemory;
use crate::error::{Error, Result};
use crate::geometry::{BBox, TemporalSpan, Tube};
use crate::nn::{logit, sinusoidal_tensor, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::query::ContentQuerySet;

/// Decoded query features `P: B×T×N×C`.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub p: Tensor,
}

#[derive(Clone, Debug)]
pub struct Predictions {
    /// `B×T×N×4`, `(cx, cy, w, h)` in `(0,1)`.
    pub boxes: Tensor,
    /// `B×T×N×2` start/end logits.
    pub time_logits: Tensor,
    /// `B×T×N` confidence logits.
    pub confidence: Tensor,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    box_head: Mlp,
    time_head: Linear,
    confidence_head: Linear,
    box_mode: BoxMode,
    dim: usize,
}

impl QueryDecoder {
    pub fn new(store: &mut ParamStore, config: &DecoderConfig, dim: usize, box_mode: BoxMode) -> Result<Self> {
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                Ok(DecoderLayer {
                    norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), dim)?,
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), dim, config.heads)?,
                    norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), dim)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), dim, config.heads)?,
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), dim)?,
                    ffn: Mlp::new(store, &format!("{p}.ffn"), &[dim, config.ffn_dim, dim])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(store, "decoder.norm", dim)?,
            box_head: Mlp::new(store, "decoder.box_head", &[dim, dim, dim, 4])?,
            time_head: Linear::new(store, "decoder.time_head", dim, 2)?,
            confidence_head: Linear::new(store, "decoder.confidence_head", dim, 1)?,
            box_mode,
            dim,
        })
    }

    pub fn box_mode(&self) -> BoxMode {
        self.box_mode
    }

    pub fn decode(&self, memory: &FusedMemory, queries: &ContentQuerySet) -> Result<DecoderOutput> {
        let (b, t, n, c) = queries.queries.dims4()?;
        if c != self.dim || memory.h.dims()[0] != b || memory.h.dims()[2] != c {
            return Err(Error::Shape(format!(
                "queries {:?} vs memory {:?}",
                queries.queries.dims(),
                memory.h.dims()
            )));
        }
        let frames: Vec<f64> = (0..t).map(|f| f as f64).collect();
        let pe = sinusoidal_tensor(&frames, c, queries.queries.device())?.reshape((1, t, 1, c))?;
        let mut x = queries.queries.broadcast_add(&pe)?;
        for layer in &self.layers {
            let per_frame = layer.norm_self.forward(&x)?.reshape((b * t, n, c))?;
            let s = layer.self_attn.forward(&per_frame, &per_frame, None)?;
            x = (x + s.reshape((b, t, n, c))?)?;
            let flat = layer.norm_cross.forward(&x)?.reshape((b, t * n, c))?;
            let a = layer.cross_attn.forward(&flat, &memory.h, Some(&memory.mask))?;
            x = (x + a.reshape((b, t, n, c))?)?;
            x = (&x + layer.ffn.forward(&layer.norm_ffn.forward(&x)?)?)?;
        }
        Ok(DecoderOutput {
            p: self.final_norm.forward(&x)?,
        })
    }

    /// `regions: N×4` boxes of the query bank, used in delta mode.
    pub fn predict(&self, out: &DecoderOutput, regions: &Tensor) -> Result<Predictions> {
        let raw = self.box_head.forward(&out.p)?;
        let raw = match self.box_mode {
            BoxMode::Absolute => raw,
            BoxMode::Delta => raw.broadcast_add(&logit(regions)?)?,
        };
        Ok(Predictions {
            boxes: candle_nn::ops::sigmoid(&raw)?,
            time_logits: self.time_head.forward(&out.p)?,
            confidence: self.confidence_head.forward(&out.p)?.squeeze(D::Minus1)?,
        })
    }
}

/// Host copy of one sample's predictions over its real frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePredictions {
    /// `[t][i]`.
    pub boxes: Vec<Vec<BBox>>,
    pub start_logits: Vec<Vec<f64>>,
    pub end_logits: Vec<Vec<f64>>,
    pub confidence: Vec<Vec<f64>>,
}

impl SamplePredictions {
    pub fn from_batch(preds: &Predictions, sample: usize, frames: usize) -> Result<Self> {
        let boxes = preds.boxes.get(sample)?.narrow(0, 0, frames)?.to_vec3::<f64>()?;
        let time = preds.time_logits.get(sample)?.narrow(0, 0, frames)?.to_vec3::<f64>()?;
        let confidence = preds.confidence.get(sample)?.narrow(0, 0, frames)?.to_vec2::<f64>()?;
        Ok(Self {
            boxes: boxes
                .iter()
                .map(|f| f.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect())
                .collect(),
            start_logits: time.iter().map(|f| f.iter().map(|v| v[0]).collect()).collect(),
            end_logits: time.iter().map(|f| f.iter().map(|v| v[1]).collect()).collect(),
            confidence,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.confidence.len()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledTube {
    pub tube: Tube,
    /// Highest-confidence query per frame.
    pub selected: Vec<usize>,
    pub start_dist: Vec<f64>,
    pub end_dist: Vec<f64>,
}

/// Inference-time tube: the most confident query's box on every frame of the
/// predicted span. Trimmed videos always span every frame.
pub fn assemble_tube(pred: &SamplePredictions, trimmed: bool) -> Result<AssembledTube> {
    let t = pred.num_frames();
    if t == 0 {
        return Err(Error::Invalid("cannot assemble a tube over zero frames".into()));
    }
    let selected: Vec<usize> = pred.confidence.iter().map(|c| argmax(c)).collect();
    let start_dist = softmax(&selected.iter().enumerate().map(|(f, &i)| pred.start_logits[f][i]).collect::<Vec<_>>());
    let end_dist = softmax(&selected.iter().enumerate().map(|(f, &i)| pred.end_logits[f][i]).collect::<Vec<_>>());
    let span = if trimmed {
        TemporalSpan::full(t)?
    } else {
        let s = argmax(&start_dist);
        TemporalSpan::new(s, argmax(&end_dist).max(s))?
    };
    let boxes = span.frames().map(|f| pred.boxes[f][selected[f]]).collect();
    Ok(AssembledTube {
        tube: Tube::new(span, boxes)?,
        selected,
        start_dist,
        end_dist,
    })
}
