//! Attention export for one image: full per-head matrices as JSON and the
//! attention row of a chosen cell as grayscale PGM heatmaps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Scenario;
use crate::detector::{images_to_tensor, Detector};
use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::reasoning::attention_maps;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub variant: Variant,
    pub scale_id: usize,
    pub grid_hw: (usize, usize),
    /// `(row, col)` of the query cell.
    pub cell: (usize, usize),
    /// One `n × n` row-stochastic matrix per head, `n = H·W`, cells in
    /// row-major order.
    pub heads: Vec<Vec<Vec<f64>>>,
}

impl AttentionExport {
    pub fn query_index(&self) -> usize {
        self.cell.0 * self.grid_hw.1 + self.cell.1
    }

    /// Attention paid by the query cell to every cell, per head.
    pub fn query_rows(&self) -> Vec<&[f64]> {
        let q = self.query_index();
        self.heads.iter().map(|m| m[q].as_slice()).collect()
    }
}

pub fn inspect_attention<T: Scalar>(
    model: &Detector<T>,
    scene: &Scenario,
    scale_id: usize,
    cell: (usize, usize),
) -> Result<AttentionExport> {
    if !model.variant().has_reasoning() {
        return Err(Error::Usage("the baseline variant has no attention to inspect".into()));
    }
    let scales = model.config().scales()?;
    let scale = scales
        .get(scale_id)
        .ok_or_else(|| Error::Usage(format!("scale {scale_id} does not exist (model has {})", scales.len())))?;
    let (h, w) = scale.grid_hw;
    if cell.0 >= h || cell.1 >= w {
        return Err(Error::Usage(format!("cell {cell:?} lies outside the {h}x{w} grid")));
    }
    let tape = Tape::inference();
    let images = tape.constant(images_to_tensor(std::slice::from_ref(scene))?);
    let fwd = model.forward(&tape, images)?;
    let attn = fwd.attention[scale_id].expect("reasoner variants record attention");
    let maps = attention_maps(&attn.value(), scale.n_heads)?;
    let heads = maps[0]
        .iter()
        .map(|m| {
            let n = m.shape()[0];
            m.data()
                .chunks_exact(n)
                .map(|row| row.iter().map(|v| v.to_f64_lossy()).collect())
                .collect()
        })
        .collect();
    Ok(AttentionExport {
        variant: model.variant(),
        scale_id,
        grid_hw: (h, w),
        cell,
        heads,
    })
}

/// ASCII (P2) grayscale image of `values` laid out as `h × w`, scaled so
/// the largest value is white. Each cell is drawn as a `zoom × zoom` block.
pub fn heatmap_pgm(values: &[f64], h: usize, w: usize, zoom: usize) -> Result<String> {
    if values.len() != h * w || zoom == 0 {
        return Err(Error::shape("heatmap_pgm", &[values.len()], &[h, w]));
    }
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let level = |v: f64| if max > 0.0 { (255.0 * v / max).round().clamp(0.0, 255.0) as u8 } else { 0 };
    let mut out = format!("P2\n{} {}\n255\n", w * zoom, h * zoom);
    for r in 0..h * zoom {
        let row: Vec<String> = (0..w * zoom)
            .map(|c| level(values[(r / zoom) * w + c / zoom]).to_string())
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    Ok(out)
}
