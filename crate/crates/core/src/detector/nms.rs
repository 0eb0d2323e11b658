use std::cmp::Ordering;

use super::Detection;
use crate::boxes::iou;

/// Total order used for NMS and reporting: score descending, then class,
/// then box coordinates and scale ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
        .then(a.scale_id.cmp(&b.scale_id))
}

/// Greedy per-class non-maximum suppression. A box is dropped when it
/// overlaps an already kept box of the same class by more than
/// `iou_threshold`. Output is sorted by [`detection_order`].
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
