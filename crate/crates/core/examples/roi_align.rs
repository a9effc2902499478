//! Pool regional features from a feature grid and turn them into queries.

use candle::{Device, Tensor};
use vidground::config::RegionInit;
use vidground::encoder::flatten_tensor;
use vidground::nn::ParamStore;
use vidground::query::{boxes_tensor, roi_align, QueryGenerator};
use vidground::geometry::BBox;

fn main() -> vidground::Result<()> {
    let device = Device::Cpu;
    // one video, one frame, a 4x4 grid whose single channel is x + 4y
    let cells: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let grid = Tensor::from_vec(cells, (1, 1, 4, 4, 1), &device)?;
    let boxes = boxes_tensor(&[BBox::new(0.5, 0.5, 1.0, 1.0), BBox::new(0.125, 0.125, 0.25, 0.25)], &device)?;
    let pooled = roi_align(&grid, &boxes, 2, 4)?;
    println!("pooled bins (region, bin_y, bin_x):");
    for (r, region) in pooled.squeeze(0)?.squeeze(0)?.squeeze(3)?.to_vec3::<f64>()?.iter().enumerate() {
        println!("  region {r}: {region:?}");
    }

    let mut store = ParamStore::new(0, &device);
    let generator = QueryGenerator::new(&mut store, 4, 8, 3, 4, true, RegionInit::Grid)?;
    for (i, b) in generator.bank().boxes_f64()?.iter().enumerate() {
        println!("region {i}: cx={:.2} cy={:.2} w={:.2} h={:.2}", b.cx, b.cy, b.w, b.h);
    }
    let video = flatten_tensor(&Tensor::randn(0.0, 1.0, (1, 3, 8, 6, 6), &device)?)?;
    let queries = generator.generate(&video)?;
    println!("queries {:?} from regions {:?}", queries.queries.dims(), queries.regions);
    Ok(())
}
