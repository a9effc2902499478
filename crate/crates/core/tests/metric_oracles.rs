//! Box and tube metrics against rasterization and frame-enumeration oracles.

mod common;

use vidground::geometry::{box_giou, box_iou, BBox};

#[test]
fn iou_and_giou_match_rasterization() {
    let (iou, giou) = common::box_metric_oracle(10_000, 1);
    assert!(iou < 2e-3, "iou error {iou:e}");
    assert!(giou < 2e-3, "giou error {giou:e}");
}

#[test]
fn raster_oracle_is_exact_on_cell_aligned_boxes() {
    let a = BBox::from_corners(0.1, 0.2, 0.5, 0.6);
    let b = BBox::from_corners(0.3, 0.4, 0.9, 0.7);
    // inter 0.2×0.2, union 0.16 + 0.18 - 0.04, hull 0.8×0.5
    assert!((common::raster_iou(&a, &b) - 0.04 / 0.30).abs() < 1e-9);
    assert!((common::raster_giou(&a, &b) - (0.04 / 0.30 - 0.10 / 0.40)).abs() < 1e-9);
    assert!((box_iou(&a, &b) - 0.04 / 0.30).abs() < 1e-12);
    assert!((box_giou(&a, &b) - (0.04 / 0.30 - 0.10 / 0.40)).abs() < 1e-12);
}

#[test]
fn viou_and_tiou_match_frame_enumeration_exactly() {
    assert_eq!(common::temporal_oracle_mismatches(5_000, 2), 0);
}

#[test]
fn giou_is_scale_invariant() {
    let worst = common::giou_scale_invariance(10_000, 3);
    assert!(worst < 1e-9, "{worst:e}");
}
