use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autograd::kernels::sigmoid;
use crate::boxes::BBox;
use crate::data::Object;
use crate::error::{Error, Result};
use crate::fusion::ScaleConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const OFFSET_EPS: f64 = 1e-6;
const MAX_LOG_SCALE: f64 = 8.0;

/// One scored box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub scale_id: usize,
}

/// Decodes one image's head output `[5 + n_classes, H, W]` into one
/// detection per cell (no thresholding). Channel layout per cell:
/// objectness, tx, ty, tw, th, class logits.
pub fn decode_grid<T: Scalar>(pred: &Tensor<T>, scale: &ScaleConfig, stride: usize, prior: f64) -> Result<Vec<Detection>> {
    let s = pred.shape();
    let (h, w) = scale.grid_hw;
    if s.len() != 3 || s[0] < 6 || s[1] != h || s[2] != w {
        return Err(Error::shape("decode_grid", s, &[0, h, w]));
    }
    let n_cls = s[0] - 5;
    let plane = h * w;
    let d = pred.data();
    let at = |c: usize, cell: usize| d[c * plane + cell].to_f64_lossy();
    let stride = stride as f64;
    let mut out = Vec::with_capacity(plane);
    for gy in 0..h {
        for gx in 0..w {
            let cell = gy * w + gx;
            let obj = sigmoid(at(0, cell));
            let cx = (gx as f64 + sigmoid(at(1, cell))) * stride;
            let cy = (gy as f64 + sigmoid(at(2, cell))) * stride;
            let bw = prior * at(3, cell).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
            let bh = prior * at(4, cell).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
            let logits: Vec<f64> = (0..n_cls).map(|c| at(5 + c, cell)).collect();
            let (best, &top) = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            let denom: f64 = logits.iter().map(|&l| (l - top).exp()).sum();
            out.push(Detection {
                bbox: BBox::from_center(cx, cy, bw, bh),
                class_id: best,
                score: obj / denom,
                scale_id: scale.scale_id,
            });
        }
    }
    Ok(out)
}

/// Cell and raw head values `[tx, ty, tw, th]` that decode back to `bbox`.
/// Centre offsets are clamped just inside `(0, 1)` so the logits stay finite.
pub fn encode_box(bbox: &BBox, stride: usize, prior: f64, grid_hw: (usize, usize)) -> Result<((usize, usize), [f64; 4])> {
    let (cx, cy) = bbox.center();
    let stride = stride as f64;
    let (h, w) = grid_hw;
    if !bbox.is_valid() || cx < 0.0 || cy < 0.0 || cx >= w as f64 * stride || cy >= h as f64 * stride {
        return Err(Error::Data(format!("box {bbox:?} is degenerate or centred outside the image")));
    }
    let gx = ((cx / stride).floor() as usize).min(w - 1);
    let gy = ((cy / stride).floor() as usize).min(h - 1);
    let ox = (cx / stride - gx as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    let oy = (cy / stride - gy as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    Ok((
        (gx, gy),
        [logit(ox), logit(oy), (bbox.width() / prior).ln(), (bbox.height() / prior).ln()],
    ))
}

/// Training target for one ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub scale: usize,
    pub cell: (usize, usize),
    pub class_id: usize,
    /// `[offset_x, offset_y, ln(w / prior), ln(h / prior)]`.
    pub target: [f64; 4],
}

fn centred_iou(w: f64, h: f64, prior: f64) -> f64 {
    let inter = w.min(prior) * h.min(prior);
    inter / (w * h + prior * prior - inter)
}

/// Assigns each ground-truth box to the scale whose prior has the highest
/// centred IoU (finer scale on ties) and to the cell holding its centre.
/// When two boxes land in the same cell of the same image and scale, the
/// first one keeps it.
pub fn assign_targets(truths: &[&[Object]], config: &ModelConfig) -> Result<Vec<Assignment>> {
    let mut out: Vec<Assignment> = Vec::new();
    for (image, objects) in truths.iter().enumerate() {
        for obj in objects.iter() {
            if obj.class_id >= config.n_classes {
                return Err(Error::Data(format!("class id {} out of range", obj.class_id)));
            }
            let (w, h) = (obj.bbox.width(), obj.bbox.height());
            let mut scale = 0;
            for s in 1..config.n_scales() {
                if centred_iou(w, h, config.priors[s]) > centred_iou(w, h, config.priors[scale]) {
                    scale = s;
                }
            }
            let g = config.grid_size(scale);
            let (cell, raw) = encode_box(&obj.bbox, config.stride(scale), config.priors[scale], (g, g))?;
            if out.iter().any(|a| a.image == image && a.scale == scale && a.cell == cell) {
                continue;
            }
            out.push(Assignment {
                image,
                scale,
                cell,
                class_id: obj.class_id,
                target: [sigmoid(raw[0]), sigmoid(raw[1]), raw[2], raw[3]],
            });
        }
    }
    Ok(out)
}
