//! Pluggable visual and text encoders.
//!
//! [`ToyBackbone`] mean-pools image patches and projects them to the model
//! width, and embeds tokens through a lookup table. Anything implementing
//! [`Backbone`] can replace it without touching the rest of the model.

use candle::{Device, Tensor};

use crate::config::{BackboneConfig, BackboneKind};
use crate::data::VisualInput;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, sinusoidal_tensor, Init, Linear, ParamStore};

/// Video features `B×T×C×H×W` before positional encoding, plus the encoding.
#[derive(Clone, Debug)]
pub struct VisualFeatureGrid {
    pub features: Tensor,
    /// `T×C×H×W`, shared by every batch row.
    pub pos: Tensor,
    /// Normalized `(cx, cy)` of each cell, row-major.
    pub centers: Vec<(f64, f64)>,
    pub height: usize,
    pub width: usize,
}

impl VisualFeatureGrid {
    /// Features with the positional encoding added.
    pub fn encoded(&self) -> Result<Tensor> {
        Ok(self.features.broadcast_add(&self.pos)?)
    }

    pub fn num_frames(&self) -> usize {
        self.features.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.dims()[2]
    }
}

/// Token features `B×L×C`; rows beyond each sentence are zero.
#[derive(Clone, Debug)]
pub struct TextFeatureSeq {
    pub features: Tensor,
    /// `B×L`, 1 on real tokens.
    pub mask: Tensor,
}

pub trait Backbone {
    fn dim(&self) -> usize;
    fn encode_frames(&self, input: &VisualInput) -> Result<VisualFeatureGrid>;
    fn encode_text(&self, tokens: &Tensor, mask: &Tensor) -> Result<TextFeatureSeq>;
}

/// Fixed `T×C×H×W` encoding: spatial sin/cos over cell rows (first half of
/// the channels) and columns (second half), plus a temporal sin/cos over frames.
pub fn video_position_encoding(t: usize, dim: usize, h: usize, w: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let ys: Vec<f64> = (0..h).map(|y| y as f64).collect();
    let xs: Vec<f64> = (0..w).map(|x| x as f64).collect();
    let ts: Vec<f64> = (0..t).map(|f| f as f64).collect();
    let pe_y = sinusoidal(&ys, half);
    let pe_x = sinusoidal(&xs, dim - half);
    let pe_t = sinusoidal(&ts, dim);
    let mut out = vec![0.0; t * dim * h * w];
    for f in 0..t {
        for c in 0..dim {
            for y in 0..h {
                for x in 0..w {
                    let spatial = if c < half {
                        pe_y[y * half + c]
                    } else {
                        pe_x[x * (dim - half) + c - half]
                    };
                    out[((f * dim + c) * h + y) * w + x] = spatial + pe_t[f * dim + c];
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (t, dim, h, w), device)?)
}

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    patch: usize,
    dim: usize,
    pixel_proj: Linear,
    feature_proj: Option<Linear>,
    embedding: Tensor,
}

impl ToyBackbone {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, dim: usize, vocab_size: usize) -> Result<Self> {
        match config.kind {
            BackboneKind::Toy => {}
        }
        let feature_proj = match config.feature_channels {
            Some(c) => Some(Linear::new(store, "backbone.feature_proj", c, dim)?),
            None => None,
        };
        Ok(Self {
            patch: config.patch,
            dim,
            pixel_proj: Linear::new(store, "backbone.pixel_proj", 3, dim)?,
            feature_proj,
            embedding: store.param("backbone.embedding", &[vocab_size, dim], Init::Uniform(1.0))?,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Patch means `B×T×H×W×3` of a pixel batch.
    pub fn pool_patches(&self, pixels: &Tensor) -> Result<Tensor> {
        let (b, t, c, hi, wi) = pixels.dims5()?;
        let p = self.patch;
        if hi % p != 0 || wi % p != 0 {
            return Err(Error::Shape(format!("image {hi}×{wi} not divisible by patch {p}")));
        }
        let (h, w) = (hi / p, wi / p);
        let pooled = pixels
            .reshape((b * t, c, h, p, w, p))?
            .mean((3, 5))?
            .reshape((b, t, c, h, w))?
            .permute((0, 1, 3, 4, 2))?;
        Ok(pooled)
    }
}

impl Backbone for ToyBackbone {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_frames(&self, input: &VisualInput) -> Result<VisualFeatureGrid> {
        let (cells, proj) = match input {
            VisualInput::Pixels(px) => (self.pool_patches(px)?, &self.pixel_proj),
            VisualInput::Features(f) => {
                let proj = self.feature_proj.as_ref().ok_or_else(|| {
                    Error::Config("feature-grid input needs backbone.feature_channels".into())
                })?;
                (f.permute((0, 1, 3, 4, 2))?, proj)
            }
        };
        let (_, t, h, w, _) = cells.dims5()?;
        let features = proj.forward(&cells.contiguous()?)?.permute((0, 1, 4, 2, 3))?.contiguous()?;
        let pos = video_position_encoding(t, self.dim, h, w, features.device())?;
        let centers = (0..h)
            .flat_map(|y| (0..w).map(move |x| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64)))
            .collect();
        Ok(VisualFeatureGrid {
            features,
            pos,
            centers,
            height: h,
            width: w,
        })
    }

    fn encode_text(&self, tokens: &Tensor, mask: &Tensor) -> Result<TextFeatureSeq> {
        let (b, l) = tokens.dims2()?;
        let vocab = self.embedding.dims()[0];
        let max_id = tokens.flatten_all()?.max(0)?.to_scalar::<u32>()? as usize;
        if max_id >= vocab {
            return Err(Error::Shape(format!("token id {max_id} outside vocabulary of {vocab}")));
        }
        let emb = self.embedding.index_select(&tokens.flatten_all()?, 0)?.reshape((b, l, self.dim))?;
        let positions: Vec<f64> = (0..l).map(|i| i as f64).collect();
        let pe = sinusoidal_tensor(&positions, self.dim, tokens.device())?;
        let features = emb.broadcast_add(&pe)?.broadcast_mul(&mask.unsqueeze(2)?)?;
        Ok(TextFeatureSeq {
            features,
            mask: mask.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UNK_ID;
    use candle::DType;

    fn backbone() -> (ParamStore, ToyBackbone) {
        let mut store = ParamStore::new(0, &Device::Cpu);
        let bb = ToyBackbone::new(&mut store, &BackboneConfig { patch: 4, ..Default::default() }, 8, 10).unwrap();
        (store, bb)
    }

    #[test]
    fn frame_shapes_and_constant_video() {
        let (_, bb) = backbone();
        let px = (Tensor::ones((1, 2, 3, 8, 12), DType::F64, &Device::Cpu).unwrap() * 0.3).unwrap();
        let g = bb.encode_frames(&VisualInput::Pixels(px)).unwrap();
        assert_eq!(g.features.dims(), &[1, 2, 8, 2, 3]);
        assert_eq!(g.pos.dims(), &[2, 8, 2, 3]);
        let v: Vec<f64> = g.features.flatten_all().unwrap().to_vec1().unwrap();
        // every cell of a channel equal
        for chunk in v.chunks(6) {
            assert!(chunk.iter().all(|&x| x == chunk[0]));
        }
    }

    #[test]
    fn one_patch_change_touches_one_cell() {
        let (_, bb) = backbone();
        let base = Tensor::zeros((1, 1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let mut data: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
        // pixel (row 5, col 1) lives in patch (1, 0)
        data[5 * 8 + 1] = 1.0;
        let changed = Tensor::from_vec(data, (1, 1, 3, 8, 8), &Device::Cpu).unwrap();
        let f0 = bb.encode_frames(&VisualInput::Pixels(base)).unwrap().features;
        let f1 = bb.encode_frames(&VisualInput::Pixels(changed)).unwrap().features;
        let d = (f1 - f0).unwrap().abs().unwrap().sum(2).unwrap().flatten_all().unwrap();
        let d: Vec<f64> = d.to_vec1().unwrap();
        for (cell, v) in d.iter().enumerate() {
            assert_eq!(*v > 0.0, cell == 2, "cell {cell}");
        }
    }

    #[test]
    fn text_positions_and_mask() {
        let (_, bb) = backbone();
        let toks = Tensor::new(&[[3u32, 5, 3, 0]], &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1.0, 1.0, 1.0, 0.0]], &Device::Cpu).unwrap();
        let out = bb.encode_text(&toks, &mask).unwrap();
        assert_eq!(out.features.dims(), &[1, 4, 8]);
        let f = out.features.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let pe = sinusoidal(&[0.0, 1.0, 2.0], 8);
        for c in 0..8 {
            let a = f[0][c] - pe[c];
            let b = f[2][c] - pe[16 + c];
            assert!((a - b).abs() < 1e-12);
        }
        assert!(f[3].iter().all(|&x| x == 0.0));
        let unk = bb.encode_text(&Tensor::new(&[[UNK_ID]], &Device::Cpu).unwrap(), &Tensor::new(&[[1.0]], &Device::Cpu).unwrap()).unwrap();
        let row = unk.features.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let table = bb.embedding.get(UNK_ID as usize).unwrap().to_vec1::<f64>().unwrap();
        for c in 0..8 {
            assert!((row[c] - table[c] - pe[c]).abs() < 1e-12);
        }
        let bad = Tensor::new(&[[10u32]], &Device::Cpu).unwrap();
        assert!(bb.encode_text(&bad, &Tensor::new(&[[1.0]], &Device::Cpu).unwrap()).is_err());
    }
}
