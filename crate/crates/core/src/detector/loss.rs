use serde::{Deserialize, Serialize};

use super::{assign_targets, ModelConfig};
use crate::autograd::Var;
use crate::data::Object;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub objectness: f64,
    pub class: f64,
    #[serde(rename = "box")]
    pub boxes: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            objectness: 1.0,
            class: 1.0,
            boxes: 5.0,
        }
    }
}

/// Weighted loss (differentiable) plus its weighted components, all
/// averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub objectness: f64,
    pub class: f64,
    pub boxes: f64,
}

/// Objectness BCE over every cell of every scale, class cross-entropy and
/// squared box error at assigned cells. Box error compares
/// `sigmoid(tx), sigmoid(ty)` with the centre offsets and `tw, th` with the
/// log size ratios.
pub fn detection_loss<'t, T: Scalar>(
    predictions: &[Var<'t, T>],
    truths: &[&[Object]],
    config: &ModelConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown<'t, T>> {
    let first = predictions.first().ok_or_else(|| Error::Usage("no predictions".into()))?;
    let tape = first.tape();
    let batch = truths.len();
    let pc = config.pred_channels();
    if predictions.len() != config.n_scales() || batch == 0 {
        return Err(Error::Usage(format!(
            "expected {} scales and a non-empty batch, got {} scales for {batch} images",
            config.n_scales(),
            predictions.len()
        )));
    }
    let assignments = assign_targets(truths, config)?;
    let inv_b = 1.0 / batch as f64;
    let mut terms: Vec<Var<'t, T>> = Vec::new();
    let (mut l_obj, mut l_cls, mut l_box) = (0.0, 0.0, 0.0);

    for (s, &pred) in predictions.iter().enumerate() {
        let g = config.grid_size(s);
        let expected = [batch, pc, g, g];
        if pred.shape() != expected {
            return Err(Error::shape("detection_loss", &pred.shape(), &expected));
        }
        let plane = g * g;
        let rows = pred.permute(&[0, 2, 3, 1])?.reshape(&[batch * plane, pc])?;
        let mine: Vec<_> = assignments.iter().filter(|a| a.scale == s).collect();

        let mut obj_targets = vec![T::zero(); batch * plane];
        for a in &mine {
            obj_targets[a.image * plane + a.cell.1 * g + a.cell.0] = T::one();
        }
        let obj = rows.slice(1, 0, 1)?.bce_with_logits(&obj_targets)?.sum();
        l_obj += obj.value().item().to_f64_lossy();
        terms.push(obj.scale(T::from_f64_lossy(weights.objectness)));

        if mine.is_empty() {
            continue;
        }
        let idx: Vec<usize> = mine.iter().map(|a| a.image * plane + a.cell.1 * g + a.cell.0).collect();
        let picked = rows.gather_rows(&idx)?;
        let classes: Vec<usize> = mine.iter().map(|a| a.class_id).collect();
        let cls = picked.slice(1, 5, config.n_classes)?.cross_entropy(&classes)?.sum();
        l_cls += cls.value().item().to_f64_lossy();
        terms.push(cls.scale(T::from_f64_lossy(weights.class)));

        let xy = picked.slice(1, 1, 2)?.sigmoid();
        let wh = picked.slice(1, 3, 2)?;
        let boxes = tape.concat(&[xy, wh], 1)?;
        let target: Vec<f64> = mine.iter().flat_map(|a| a.target).collect();
        let target = tape.constant(crate::tensor::Tensor::from_f64(&[mine.len(), 4], &target)?);
        let diff = boxes.sub(target)?;
        let sq = diff.mul(diff)?.sum();
        l_box += sq.value().item().to_f64_lossy();
        terms.push(sq.scale(T::from_f64_lossy(weights.boxes)));
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = total.add(t)?;
    }
    let total = total.scale(T::from_f64_lossy(inv_b));
    if !total.value().is_finite() {
        return Err(Error::Numeric("detection loss is not finite".into()));
    }
    Ok(LossBreakdown {
        total,
        objectness: weights.objectness * l_obj * inv_b,
        class: weights.class * l_cls * inv_b,
        boxes: weights.boxes * l_box * inv_b,
    })
}
