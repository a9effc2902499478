//! Cross-modal transformer encoder: video tokens and text tokens are
//! concatenated and mixed by pre-norm self-attention blocks.

use candle::Tensor;

use crate::backbones::VisualFeatureGrid;
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Mlp, MultiHeadAttention, ParamStore};

/// Video tokens `U: B×F×C` (rows ordered t, then y, then x) and their grid coordinates.
#[derive(Clone, Debug)]
pub struct FlatVideo {
    pub tokens: Tensor,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
}

impl FlatVideo {
    pub fn row(&self, t: usize, y: usize, x: usize) -> usize {
        t * self.height * self.width + y * self.width + x
    }

    /// `(t, y, x)` of a row.
    pub fn coords(&self, row: usize) -> (usize, usize, usize) {
        let hw = self.height * self.width;
        (row / hw, (row % hw) / self.width, row % self.width)
    }

    /// Back to `B×T×C×H×W`.
    pub fn unflatten(&self) -> Result<Tensor> {
        let (b, _, c) = self.tokens.dims3()?;
        Ok(self
            .tokens
            .reshape((b, self.num_frames, self.height, self.width, c))?
            .permute((0, 1, 4, 2, 3))?
            .contiguous()?)
    }

    /// Per-frame grids `B×T×H×W×C`.
    pub fn grid(&self) -> Result<Tensor> {
        let (b, _, c) = self.tokens.dims3()?;
        Ok(self.tokens.reshape((b, self.num_frames, self.height, self.width, c))?)
    }
}

/// Flatten the position-encoded grid.
pub fn flatten_video(grid: &VisualFeatureGrid) -> Result<FlatVideo> {
    let v = grid.encoded()?;
    flatten_tensor(&v)
}

/// Flatten any `B×T×C×H×W` tensor.
pub fn flatten_tensor(v: &Tensor) -> Result<FlatVideo> {
    let (b, t, c, h, w) = v.dims5()?;
    Ok(FlatVideo {
        tokens: v.permute((0, 1, 3, 4, 2))?.reshape((b, t * h * w, c))?,
        num_frames: t,
        height: h,
        width: w,
    })
}

/// Expand a `B×T` frame mask to the `B×F` token mask.
pub fn token_mask(frame_mask: &Tensor, cells_per_frame: usize) -> Result<Tensor> {
    let (b, t) = frame_mask.dims2()?;
    Ok(frame_mask
        .unsqueeze(2)?
        .broadcast_as((b, t, cells_per_frame))?
        .reshape((b, t * cells_per_frame))?)
}

/// Encoder output `H: B×(F+L)×C`; the first `F` rows are `H^V`, the rest `H^Y`.
#[derive(Clone, Debug)]
pub struct FusedMemory {
    pub h: Tensor,
    /// `B×(F+L)`, 1 on rows that may be attended.
    pub mask: Tensor,
    pub num_visual: usize,
}

impl FusedMemory {
    pub fn visual(&self) -> Result<Tensor> {
        Ok(self.h.narrow(1, 0, self.num_visual)?)
    }

    pub fn text(&self) -> Result<Tensor> {
        let total = self.h.dims()[1];
        Ok(self.h.narrow(1, self.num_visual, total - self.num_visual)?)
    }

    pub fn num_text(&self) -> usize {
        self.h.dims()[1] - self.num_visual
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = self.norm_attn.forward(x)?;
        let a = self.attn.forward_with_weights(&n, &n, Some(mask))?;
        let x = (x + a.output)?;
        let x = (&x + self.ffn.forward(&self.norm_ffn.forward(&x)?)?)?;
        Ok((x, a.weights))
    }
}

#[derive(Clone, Debug)]
pub struct CrossModalEncoder {
    layers: Vec<EncoderLayer>,
    modality: Option<Tensor>,
}

impl CrossModalEncoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, dim: usize, modality_embeddings: bool) -> Result<Self> {
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                Ok(EncoderLayer {
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), dim)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), dim, config.heads)?,
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), dim)?,
                    ffn: Mlp::new(store, &format!("{p}.ffn"), &[dim, config.ffn_dim, dim])?,
                })
            })
            .collect::<Result<_>>()?;
        let modality = if modality_embeddings {
            Some(store.param("encoder.modality", &[2, dim], Init::Uniform(0.1))?)
        } else {
            None
        };
        Ok(Self { layers, modality })
    }

    /// Concatenate `u: B×F×C` and `y: B×L×C` and run the encoder stack.
    pub fn fuse(&self, u: &Tensor, y: &Tensor, visual_mask: &Tensor, text_mask: &Tensor) -> Result<FusedMemory> {
        Ok(self.fuse_with_attention(u, y, visual_mask, text_mask)?.0)
    }

    /// Like [`fuse`](Self::fuse), also returning each layer's attention weights.
    pub fn fuse_with_attention(
        &self,
        u: &Tensor,
        y: &Tensor,
        visual_mask: &Tensor,
        text_mask: &Tensor,
    ) -> Result<(FusedMemory, Vec<Tensor>)> {
        let (b, f, c) = u.dims3()?;
        let (by, _, cy) = y.dims3()?;
        if b != by || c != cy {
            return Err(Error::Shape(format!("video tokens {:?} vs text tokens {:?}", u.dims(), y.dims())));
        }
        let (u, y) = match &self.modality {
            Some(m) => (u.broadcast_add(&m.get(0)?)?, y.broadcast_add(&m.get(1)?)?),
            None => (u.clone(), y.clone()),
        };
        let mut x = Tensor::cat(&[&u, &y], 1)?;
        let mask = Tensor::cat(&[visual_mask, text_mask], 1)?;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (nx, w) = layer.forward(&x, &mask)?;
            x = nx;
            weights.push(w);
        }
        Ok((
            FusedMemory {
                h: x,
                mask,
                num_visual: f,
            },
            weights,
        ))
    }
}
