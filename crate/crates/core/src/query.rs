//! Content-aware query generation.
//!
//! A bank of `N` learnable region boxes is shared by every frame. For each
//! frame and region the video tokens under the region are pooled by RoI
//! alignment (bilinear sampling on a `P×P` bin grid), flattened and projected
//! back to the model width. The pooled features become the decoder queries,
//! so every query starts from what its region actually shows.
//!
//! RoI alignment is written as two interpolation matrices, one per axis:
//! `pooled[p, q] = Σ_y Σ_x Ay[p, y] · Ax[q, x] · grid[y, x]`, where each row of
//! `Ax` averages the bilinear hat weights `max(0, 1 - |g - x|)` of the bin's
//! sampling points. Both matrices are differentiable functions of the region
//! box, so gradients reach the region parameters as well as the features.

use candle::{Device, Tensor};
use rand::Rng;

use crate::config::RegionInit;
use crate::encoder::FlatVideo;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{logit_f64, sigmoid_f64, Init, Linear, ParamStore};

/// Learnable region boxes, stored as unconstrained logits of `(cx, cy, w, h)`.
#[derive(Clone, Debug)]
pub struct QueryRegionBank {
    raw: Tensor,
}

pub const REGION_PARAM: &str = "query.regions";

impl QueryRegionBank {
    /// Grid mode needs a perfect square `n`; otherwise boxes are drawn at random.
    pub fn init(store: &mut ParamStore, n: usize, mode: RegionInit) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("at least one query region is required".into()));
        }
        let side = (n as f64).sqrt().round() as usize;
        let boxes: Vec<BBox> = match mode {
            RegionInit::Grid if side * side == n => (0..n)
                .map(|i| {
                    let (r, c) = (i / side, i % side);
                    BBox::new((c as f64 + 0.5) / side as f64, (r as f64 + 0.5) / side as f64, 0.5, 0.5)
                })
                .collect(),
            mode => {
                if mode == RegionInit::Grid {
                    log::warn!("{n} regions is not a perfect square; using random region init");
                }
                let mut rng = store.rng_for(REGION_PARAM);
                (0..n)
                    .map(|_| {
                        BBox::new(
                            rng.random_range(0.15..0.85),
                            rng.random_range(0.15..0.85),
                            rng.random_range(0.2..0.5),
                            rng.random_range(0.2..0.5),
                        )
                    })
                    .collect()
            }
        };
        let logits: Vec<f64> = boxes.iter().flat_map(|b| b.to_array().map(logit_f64)).collect();
        let raw = store.param_from(REGION_PARAM, Tensor::from_vec(logits, (n, 4), store.device())?)?;
        Ok(Self { raw })
    }

    pub fn from_raw(raw: Tensor) -> Self {
        Self { raw }
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `N×4` boxes in `(0,1)`.
    pub fn boxes(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.raw)?)
    }

    pub fn boxes_f64(&self) -> Result<Vec<BBox>> {
        let raw = self.raw.to_vec2::<f64>()?;
        Ok(raw
            .iter()
            .map(|r| BBox::new(sigmoid_f64(r[0]), sigmoid_f64(r[1]), sigmoid_f64(r[2]), sigmoid_f64(r[3])))
            .collect())
    }
}

/// Relative positions of the `bins × samples` sampling points inside a box side.
fn sample_offsets(bins: usize, samples: usize) -> Vec<f64> {
    (0..bins)
        .flat_map(|p| (0..samples).map(move |s| (p as f64 + (s as f64 + 0.5) / samples as f64) / bins as f64))
        .collect()
}

/// Bin-averaged interpolation matrix `N×bins×cells` along one axis.
///
/// `lo`, `hi`: `N×1` normalized box sides, already clipped to `[0,1]`.
fn axis_weights(lo: &Tensor, hi: &Tensor, cells: usize, bins: usize, samples: usize) -> Result<Tensor> {
    let n = lo.dims()[0];
    let device = lo.device();
    let offsets = Tensor::from_vec(sample_offsets(bins, samples), (1, bins * samples), device)?;
    let pos = lo.broadcast_add(&(hi - lo)?.broadcast_mul(&offsets)?)?;
    // cell i covers [i/cells, (i+1)/cells); its center sits at grid coordinate i
    let g = pos.affine(cells as f64, -0.5)?.clamp(0.0, (cells - 1) as f64)?;
    let idx: Vec<f64> = (0..cells).map(|i| i as f64).collect();
    let idx = Tensor::from_vec(idx, (1, 1, cells), device)?;
    let hat = g.unsqueeze(2)?.broadcast_sub(&idx)?.abs()?.affine(-1.0, 1.0)?.relu()?;
    Ok(hat.reshape((n, bins, samples, cells))?.mean(2)?)
}

/// RoI alignment of every region on every frame.
///
/// `grid: B×T×H×W×C`, `boxes: N×4` in `(cx, cy, w, h)`. Returns
/// `B×T×N×bins×bins×C` bin means (before any projection). Boxes are clipped
/// to the frame; sampling points outside the outer cell centers take the
/// border value.
pub fn roi_align(grid: &Tensor, boxes: &Tensor, bins: usize, samples: usize) -> Result<Tensor> {
    let (b, t, h, w, c) = grid.dims5()?;
    let n = boxes.dims2()?.0;
    let cx = boxes.narrow(1, 0, 1)?;
    let cy = boxes.narrow(1, 1, 1)?;
    let half_w = boxes.narrow(1, 2, 1)?.affine(0.5, 0.0)?;
    let half_h = boxes.narrow(1, 3, 1)?.affine(0.5, 0.0)?;
    let x1 = (&cx - &half_w)?.clamp(0.0, 1.0)?;
    let x2 = (&cx + &half_w)?.clamp(0.0, 1.0)?;
    let y1 = (&cy - &half_h)?.clamp(0.0, 1.0)?;
    let y2 = (&cy + &half_h)?.clamp(0.0, 1.0)?;
    let wx = axis_weights(&x1, &x2, w, bins, samples)?; // N×P×W
    let wy = axis_weights(&y1, &y2, h, bins, samples)?; // N×P×H

    let bt = b * t;
    // contract x: (N·P)×W · W×(BT·H·C)
    let gx = grid.reshape((bt, h, w, c))?.permute((2, 0, 1, 3))?.contiguous()?.reshape((w, bt * h * c))?;
    let z = wx.reshape((n * bins, w))?.matmul(&gx)?; // (N·Pq)×(BT·H·C)
    // contract y per region: N×Pp×H · N×H×(Pq·BT·C)
    let z = z
        .reshape((n, bins, bt, h, c))?
        .permute((0, 3, 1, 2, 4))?
        .contiguous()?
        .reshape((n, h, bins * bt * c))?;
    let pooled = wy.matmul(&z)?; // N×Pp×(Pq·BT·C)
    Ok(pooled
        .reshape((n, bins, bins, bt, c))?
        .permute((3, 0, 1, 2, 4))?
        .contiguous()?
        .reshape((b, t, n, bins, bins, c))?)
}

/// Decoder queries `B×T×N×C`; query `i` of every frame comes from region `i`.
#[derive(Clone, Debug)]
pub struct ContentQuerySet {
    pub queries: Tensor,
    /// Region index behind each query slot (`None` for content-agnostic queries).
    pub regions: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
enum QuerySource {
    ContentAware {
        proj: Linear,
        index_embedding: Tensor,
    },
    ContentAgnostic {
        embedding: Tensor,
    },
}

#[derive(Clone, Debug)]
pub struct QueryGenerator {
    bank: QueryRegionBank,
    source: QuerySource,
    bins: usize,
    samples: usize,
    dim: usize,
}

impl QueryGenerator {
    pub fn new(
        store: &mut ParamStore,
        num_queries: usize,
        dim: usize,
        bins: usize,
        samples: usize,
        content_aware: bool,
        init: RegionInit,
    ) -> Result<Self> {
        let bank = QueryRegionBank::init(store, num_queries, init)?;
        let source = if content_aware {
            QuerySource::ContentAware {
                proj: Linear::new(store, "query.roi_proj", bins * bins * dim, dim)?,
                index_embedding: store.param("query.index_embedding", &[num_queries, dim], Init::Uniform(1.0))?,
            }
        } else {
            content_agnostic_embedding(store, num_queries, dim)?
        };
        Ok(Self {
            bank,
            source,
            bins,
            samples,
            dim,
        })
    }

    pub fn bank(&self) -> &QueryRegionBank {
        &self.bank
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn is_content_aware(&self) -> bool {
        matches!(self.source, QuerySource::ContentAware { .. })
    }

    pub fn generate(&self, video: &FlatVideo) -> Result<ContentQuerySet> {
        let (b, _, _) = video.tokens.dims3()?;
        let t = video.num_frames;
        let n = self.bank.len();
        match &self.source {
            QuerySource::ContentAware { proj, index_embedding } => {
                let pooled = roi_align(&video.grid()?, &self.bank.boxes()?, self.bins, self.samples)?;
                let flat = pooled.reshape((b, t, n, self.bins * self.bins * self.dim))?;
                let q = proj.forward(&flat)?.broadcast_add(index_embedding)?;
                Ok(ContentQuerySet {
                    queries: q,
                    regions: Some((0..n).collect()),
                })
            }
            QuerySource::ContentAgnostic { embedding } => content_agnostic_queries(embedding, b, t),
        }
    }
}

fn content_agnostic_embedding(store: &mut ParamStore, n: usize, dim: usize) -> Result<QuerySource> {
    Ok(QuerySource::ContentAgnostic {
        embedding: store.param("query.embedding", &[n, dim], Init::Uniform(1.0))?,
    })
}

/// Learned `N×C` queries broadcast to `B×T×N×C`, independent of the video.
pub fn content_agnostic_queries(embedding: &Tensor, batch: usize, frames: usize) -> Result<ContentQuerySet> {
    let (n, c) = embedding.dims2()?;
    Ok(ContentQuerySet {
        queries: embedding.broadcast_as((batch, frames, n, c))?.contiguous()?,
        regions: None,
    })
}

/// Bilinear sample of a row-major `H×W` scalar grid at grid coordinates
/// `(gy, gx)`, border-clamped. Host-side reference used by diagnostics.
pub fn bilinear_at(grid: &[f64], h: usize, w: usize, gy: f64, gx: f64) -> f64 {
    let gy = gy.clamp(0.0, (h - 1) as f64);
    let gx = gx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
    let v = |y: usize, x: usize| grid[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

/// `N×4` tensor from boxes.
pub fn boxes_tensor(boxes: &[BBox], device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = boxes.iter().flat_map(|b| b.to_array()).collect();
    Ok(Tensor::from_vec(v, (boxes.len(), 4), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::{DType, Var};
    use rand::SeedableRng;

    fn store() -> ParamStore {
        ParamStore::new(0, &Device::Cpu)
    }

    #[test]
    fn grid_init_centers() {
        let mut s = store();
        let bank = QueryRegionBank::init(&mut s, 4, RegionInit::Grid).unwrap();
        let b = bank.boxes_f64().unwrap();
        let want = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        for (bx, (cx, cy)) in b.iter().zip(want) {
            assert!((bx.cx - cx).abs() < 1e-9 && (bx.cy - cy).abs() < 1e-9);
            assert!((bx.w - 0.5).abs() < 1e-9 && (bx.h - 0.5).abs() < 1e-9);
        }
        let mut s = store();
        let one = QueryRegionBank::init(&mut s, 1, RegionInit::Grid).unwrap().boxes_f64().unwrap();
        assert!((one[0].cx - 0.5).abs() < 1e-9 && (one[0].cy - 0.5).abs() < 1e-9);
        let mut s = store();
        let rand = QueryRegionBank::init(&mut s, 5, RegionInit::Grid).unwrap().boxes_f64().unwrap();
        assert!(rand.iter().all(|b| b.to_array().iter().all(|v| *v > 0.0 && *v < 1.0)));
    }

    #[test]
    fn constant_grid_pools_to_constant() {
        let grid = (Tensor::ones((1, 2, 4, 5, 3), DType::F64, &Device::Cpu).unwrap() * 0.7).unwrap();
        let boxes = boxes_tensor(&[BBox::new(0.3, 0.6, 0.4, 0.2), BBox::new(0.9, 0.1, 0.5, 0.5)], &Device::Cpu).unwrap();
        let pooled = roi_align(&grid, &boxes, 3, 2).unwrap();
        assert_eq!(pooled.dims(), &[1, 2, 2, 3, 3, 3]);
        let v: Vec<f64> = pooled.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn one_cell_box_single_bin_reads_that_cell() {
        let (h, w) = (4, 6);
        let data: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
        let grid = Tensor::from_vec(data, (1, 1, h, w, 1), &Device::Cpu).unwrap();
        let (y, x) = (2, 3);
        let b = BBox::from_corners(x as f64 / w as f64, y as f64 / h as f64, (x + 1) as f64 / w as f64, (y + 1) as f64 / h as f64);
        let pooled = roi_align(&grid, &boxes_tensor(&[b], &Device::Cpu).unwrap(), 1, 1).unwrap();
        let v = pooled.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - (y * w + x) as f64).abs() < 1e-12);
    }

    #[test]
    fn agnostic_queries_identical_across_frames() {
        let mut s = store();
        let g = QueryGenerator::new(&mut s, 4, 8, 3, 2, false, RegionInit::Grid).unwrap();
        let video = FlatVideo {
            tokens: Tensor::randn(0.0, 1.0, (2, 3 * 4, 8), &Device::Cpu).unwrap(),
            num_frames: 3,
            height: 2,
            width: 2,
        };
        let q = g.generate(&video).unwrap().queries;
        assert_eq!(q.dims(), &[2, 3, 4, 8]);
        let f0 = q.narrow(1, 0, 1).unwrap();
        for t in 1..3 {
            let d = (q.narrow(1, t, 1).unwrap() - &f0).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
        }
        let var = Var::from_tensor(&video.tokens).unwrap();
        let v2 = FlatVideo { tokens: var.as_tensor().clone(), ..video };
        let grads = g.generate(&v2).unwrap().queries.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(var.as_tensor()).is_none());
    }

    #[test]
    fn swapping_frames_swaps_queries() {
        let mut s = store();
        let g = QueryGenerator::new(&mut s, 4, 4, 2, 2, true, RegionInit::Grid).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..2 * 9 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tokens = Tensor::from_vec(data, (1, 18, 4), &Device::Cpu).unwrap();
        let swapped = Tensor::cat(&[tokens.narrow(1, 9, 9).unwrap(), tokens.narrow(1, 0, 9).unwrap()], 1).unwrap();
        let mk = |t: Tensor| FlatVideo { tokens: t, num_frames: 2, height: 3, width: 3 };
        let a = g.generate(&mk(tokens)).unwrap().queries;
        let b = g.generate(&mk(swapped)).unwrap().queries;
        let d = (a.narrow(1, 0, 1).unwrap() - b.narrow(1, 1, 1).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }
}
