//! Box, temporal and spatio-temporal overlap scores for a pair of tubes.

use vidground::geometry::{box_giou, box_iou, temporal_iou, viou, BBox, TemporalSpan, Tube};
use vidground::metrics::{aggregate, MetricConfig};

fn main() -> vidground::Result<()> {
    let a = BBox::new(0.40, 0.50, 0.30, 0.30);
    let b = BBox::new(0.50, 0.56, 0.30, 0.30);
    println!("iou={:.4} giou={:.4}", box_iou(&a, &b), box_giou(&a, &b));

    let gt = Tube::new(TemporalSpan::new(2, 7)?, (2..=7).map(|t| a.translated(0.02 * t as f64, 0.0)).collect())?;
    let pred = Tube::new(TemporalSpan::new(4, 9)?, (4..=9).map(|t| b.translated(0.02 * t as f64, 0.0)).collect())?;
    println!("tiou={:.4} viou={:.4}", temporal_iou(&pred.span(), &gt.span()), viou(&pred, &gt));

    let report = aggregate(&[(pred, gt.clone()), (gt.clone(), gt)], &MetricConfig::default())?;
    print!("{}", report.to_key_values());
    Ok(())
}
