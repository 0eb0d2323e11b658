//! Brute-force average precision: every score cut is matched from scratch
//! and the interpolated precision is integrated over distinct recalls.

use grsn_core::boxes::{iou, BBox};
use grsn_core::eval::{average_precision, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn greedy_hits(top: &[ScoredBox], truths: &[Vec<BBox>], thresh: f64) -> usize {
    let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let mut hits = 0;
    for d in top {
        let mut best = None;
        let mut best_iou = thresh;
        for (j, t) in truths[d.image].iter().enumerate() {
            let o = iou(&d.bbox, t);
            if !used[d.image][j] && o >= best_iou && best.is_none_or(|_| o > best_iou) {
                best = Some(j);
                best_iou = o;
            }
        }
        if let Some(j) = best {
            used[d.image][j] = true;
            hits += 1;
        }
    }
    hits
}

pub fn brute_force_ap(dets: &[ScoredBox], truths: &[Vec<BBox>], thresh: f64) -> Option<f64> {
    let n_truth: usize = truths.iter().map(Vec::len).sum();
    if n_truth == 0 {
        return None;
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let points: Vec<(f64, f64)> = (1..=sorted.len())
        .map(|k| {
            let hits = greedy_hits(&sorted[..k], truths, thresh) as f64;
            (hits / n_truth as f64, hits / k as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.random_range(0..8) as f64, rng.random_range(0..8) as f64);
    let (w, h) = (rng.random_range(2..6) as f64, rng.random_range(2..6) as f64);
    BBox::new(x, y, x + w, y + h)
}

/// Largest |AP − brute-force AP| over `cases` random problems with up to
/// 10 detections and 5 truths spread over 1–3 images.
pub fn ap_oracle_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut compared = 0;
    while compared < cases {
        let images = rng.random_range(1..4);
        let n_truth = rng.random_range(1..6);
        let mut truths = vec![Vec::new(); images];
        for _ in 0..n_truth {
            let i = rng.random_range(0..images);
            truths[i].push(random_box(&mut rng));
        }
        let n_det = rng.random_range(1..11);
        let dets: Vec<ScoredBox> = (0..n_det)
            .map(|_| {
                let image = rng.random_range(0..images);
                let bbox = if !truths[image].is_empty() && rng.random_bool(0.6) {
                    let t = truths[image][rng.random_range(0..truths[image].len())];
                    let dx = rng.random_range(-1..2) as f64;
                    BBox::new(t.x_min + dx, t.y_min, t.x_max + dx, t.y_max)
                } else {
                    random_box(&mut rng)
                };
                ScoredBox {
                    image,
                    score: rng.random_range(0.0..1.0),
                    bbox,
                }
            })
            .collect();
        let (Some(a), Some(b)) = (average_precision(&dets, &truths, 0.5), brute_force_ap(&dets, &truths, 0.5)) else {
            continue;
        };
        worst = worst.max((a - b).abs());
        compared += 1;
    }
    worst
}
