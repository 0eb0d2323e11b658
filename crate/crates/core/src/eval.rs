//! mAP@0.5 evaluation and per-class AP comparison.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::data::{Scenario, CLASS_NAMES};
use crate::detector::{Detection, Detector};
use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::scalar::Scalar;

/// A detection tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

fn ranking(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Marks each detection (in ranking order) as true or false positive.
/// Each detection takes the unmatched truth of its image with the highest
/// IoU, provided that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[ScoredBox], truths: &[Vec<BBox>], iou_thresh: f64) -> Vec<(ScoredBox, bool)> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(ranking);
    let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    sorted
        .into_iter()
        .map(|d| {
            let Some(image_truths) = truths.get(d.image) else {
                return (d, false);
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in image_truths.iter().enumerate() {
                if used[d.image][j] {
                    continue;
                }
                let o = iou(&d.bbox, t);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[d.image][j] = true;
                    (d, true)
                }
                None => (d, false),
            }
        })
        .collect()
}

/// All-point interpolated AP for one class. `truths[i]` holds the boxes of
/// image `i`. Returns `None` when there is no ground truth.
pub fn average_precision(dets: &[ScoredBox], truths: &[Vec<BBox>], iou_thresh: f64) -> Option<f64> {
    let n_truth: usize = truths.iter().map(Vec::len).sum();
    if n_truth == 0 {
        return None;
    }
    let matched = match_detections(dets, truths, iou_thresh);
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(matched.len());
    let mut precision = Vec::with_capacity(matched.len());
    for (k, (_, hit)) in matched.iter().enumerate() {
        tp += usize::from(*hit);
        recall.push(tp as f64 / n_truth as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub map50: f64,
    /// Keyed by class id; classes without ground truth are absent.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub n_images: usize,
    pub n_detections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            conf_threshold: 0.25,
            nms_iou: 0.45,
            match_iou: 0.5,
        }
    }
}

/// Scores post-NMS detections against the scenes' ground truth.
pub fn score_detections(
    detections: &[Vec<Detection>],
    scenes: &[Scenario],
    n_classes: usize,
    match_iou: f64,
    variant: Variant,
    seed: u64,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    if detections.len() != scenes.len() {
        return Err(Error::Usage(format!(
            "{} detection lists for {} scenes",
            detections.len(),
            scenes.len()
        )));
    }
    let mut per_class_ap = BTreeMap::new();
    for c in 0..n_classes {
        let truths: Vec<Vec<BBox>> = scenes
            .iter()
            .map(|s| s.objects.iter().filter(|o| o.class_id == c).map(|o| o.bbox).collect())
            .collect();
        let dets: Vec<ScoredBox> = detections
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| {
                ds.iter().filter(|d| d.class_id == c).map(move |d| ScoredBox {
                    image,
                    score: d.score,
                    bbox: d.bbox,
                })
            })
            .collect();
        if let Some(ap) = average_precision(&dets, &truths, match_iou) {
            per_class_ap.insert(c, ap);
        }
    }
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalReport {
        variant,
        seed,
        map50,
        per_class_ap,
        n_images: scenes.len(),
        n_detections: detections.iter().map(Vec::len).sum(),
    })
}

/// Runs the model over `scenes` and reports mAP@`match_iou`.
pub fn evaluate<T: Scalar>(model: &Detector<T>, scenes: &[Scenario], settings: &EvalSettings, seed: u64) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let dets = model.detect(scenes, settings.conf_threshold, settings.nms_iou)?;
    score_detections(
        &dets,
        scenes,
        model.config().n_classes,
        settings.match_iou,
        model.variant(),
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApDelta {
    pub class_id: usize,
    pub class_name: String,
    pub ap_base: f64,
    pub ap_variant: f64,
    pub delta: f64,
}

/// Per-class `AP(variant) - AP(base)`, sorted by class id.
pub fn ap_delta_report(base: &EvalReport, variant: &EvalReport) -> Result<Vec<ApDelta>> {
    if !base.per_class_ap.keys().eq(variant.per_class_ap.keys()) {
        return Err(Error::Usage(format!(
            "class sets differ: {:?} vs {:?}",
            base.per_class_ap.keys().collect::<Vec<_>>(),
            variant.per_class_ap.keys().collect::<Vec<_>>()
        )));
    }
    Ok(base
        .per_class_ap
        .iter()
        .map(|(&c, &a)| {
            let b = variant.per_class_ap[&c];
            ApDelta {
                class_id: c,
                class_name: CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string()),
                ap_base: a,
                ap_variant: b,
                delta: b - a,
            }
        })
        .collect())
}

pub fn ap_delta_csv(rows: &[ApDelta]) -> String {
    let mut out = String::from("class_id,class_name,ap_base,ap_variant,delta\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.class_id, r.class_name, r.ap_base, r.ap_variant, r.delta);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(image: usize, score: f64, x: f64) -> ScoredBox {
        ScoredBox {
            image,
            score,
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
        }
    }

    fn unit(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0)
    }

    #[test]
    fn single_hit_is_perfect() {
        assert_eq!(average_precision(&[sb(0, 0.9, 0.0)], &[vec![unit(0.0)]], 0.5), Some(1.0));
    }

    #[test]
    fn low_overlap_scores_zero() {
        // x shift of 5.38 on a 10-wide box gives IoU ~0.3
        let ap = average_precision(&[sb(0, 0.9, 5.38)], &[vec![unit(0.0)]], 0.5).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn hit_miss_hit_is_five_sixths() {
        let truths = vec![vec![unit(0.0), unit(50.0)]];
        let dets = [sb(0, 0.9, 0.0), sb(0, 0.8, 100.0), sb(0, 0.7, 50.0)];
        let ap = average_precision(&dets, &truths, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn no_truth_is_excluded() {
        assert_eq!(average_precision(&[sb(0, 0.9, 0.0)], &[vec![]], 0.5), None);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let ap = average_precision(&[sb(0, 0.9, 0.0), sb(0, 0.8, 0.0)], &[vec![unit(0.0)]], 0.5).unwrap();
        assert_eq!(ap, 1.0);
        let ap = average_precision(&[sb(0, 0.9, 0.0), sb(0, 0.95, 0.0)], &[vec![unit(0.0)]], 0.5).unwrap();
        assert_eq!(ap, 1.0);
    }

    fn report(aps: &[(usize, f64)]) -> EvalReport {
        let per_class_ap: BTreeMap<_, _> = aps.iter().copied().collect();
        EvalReport {
            variant: Variant::Baseline,
            seed: 1,
            map50: per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64,
            per_class_ap,
            n_images: 1,
            n_detections: 0,
        }
    }

    #[test]
    fn delta_sums_to_scaled_map_difference() {
        let a = report(&[(0, 0.5), (1, 0.25), (2, 0.75), (3, 0.1)]);
        let b = report(&[(0, 0.4), (1, 0.5), (2, 0.9), (3, 0.3)]);
        let rows = ap_delta_report(&a, &b).unwrap();
        let total: f64 = rows.iter().map(|r| r.delta).sum();
        assert!((total - 4.0 * (b.map50 - a.map50)).abs() < 1e-9);
        assert!(ap_delta_report(&a, &a).unwrap().iter().all(|r| r.delta == 0.0));
        let csv = ap_delta_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(3).unwrap().starts_with("2,triangle-A,"));
    }

    #[test]
    fn mismatched_class_sets_are_rejected() {
        let a = report(&[(0, 0.5), (1, 0.25)]);
        let b = report(&[(0, 0.5)]);
        assert!(matches!(ap_delta_report(&a, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn report_json_uses_documented_keys() {
        let r = report(&[(0, 0.5)]);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["variant", "seed", "map50", "per_class_ap"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["per_class_ap"]["0"], 0.5);
    }
}
