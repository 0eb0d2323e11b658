//! Toy one-stage detector: strided conv backbone, top-down neck with
//! upsample-and-concatenate merges, optional reasoner per scale, and a grid
//! head per scale.

mod head;
mod loss;
mod nms;

pub use head::{assign_targets, decode_grid, encode_box, Assignment, Detection};
pub use loss::{detection_loss, LossBreakdown, LossWeights};
pub use nms::{detection_order, nms};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::fusion::{ReasonerParams, ScaleConfig, Variant};
use crate::params::{param_rng, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyperparameters. Everything that changes the parameter
/// layout lives here (and feeds the checkpoint config hash).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub n_classes: usize,
    /// Backbone stage widths; the last `n_scales` stages feed the neck.
    pub stage_channels: Vec<usize>,
    /// Neck/reasoning depth per scale, finest first.
    pub scale_channels: Vec<usize>,
    /// Width of each attention head; heads per scale = depth / width.
    pub head_width: usize,
    /// Explicit head count per scale, overriding `head_width`.
    pub heads: Option<Vec<usize>>,
    /// Reasoning MLP hidden width as a multiple of the scale depth.
    pub mlp_ratio: usize,
    /// One square prior size (pixels) per scale, finest first.
    pub priors: Vec<f64>,
    pub leaky_slope: f64,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            image_size: 64,
            n_classes: crate::data::N_CLASSES,
            stage_channels: vec![16, 32, 64, 128],
            scale_channels: vec![32, 48],
            head_width: 16,
            heads: None,
            mlp_ratio: 2,
            priors: vec![16.0, 40.0],
            leaky_slope: 0.1,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig { variant, ..self.clone() }
    }

    pub fn n_scales(&self) -> usize {
        self.scale_channels.len()
    }

    /// Pixel stride of scale `i` (finest is 8).
    pub fn stride(&self, scale: usize) -> usize {
        8 << scale
    }

    pub fn grid_size(&self, scale: usize) -> usize {
        self.image_size / self.stride(scale)
    }

    pub fn scales(&self) -> Result<Vec<ScaleConfig>> {
        (0..self.n_scales())
            .map(|i| {
                let g = self.grid_size(i);
                let d = self.scale_channels[i];
                match &self.heads {
                    Some(h) => {
                        let n_heads = *h.get(i).ok_or_else(|| Error::Config(format!("no head count for scale {i}")))?;
                        if n_heads == 0 || !d.is_multiple_of(n_heads) {
                            return Err(Error::Config(format!(
                                "scale {i}: {n_heads} heads do not divide depth {d}"
                            )));
                        }
                        Ok(ScaleConfig {
                            scale_id: i,
                            grid_hw: (g, g),
                            d_feature: d,
                            n_heads,
                        })
                    }
                    None => ScaleConfig::with_head_width(i, (g, g), d, self.head_width),
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_scales();
        if n == 0 {
            return Err(Error::Config("at least one detection scale is required".into()));
        }
        if self.stage_channels.len() != n + 2 {
            return Err(Error::Config(format!(
                "{} scales need {} backbone stages, got {}",
                n,
                n + 2,
                self.stage_channels.len()
            )));
        }
        if self.heads.as_ref().is_some_and(|h| h.len() != n) {
            return Err(Error::Config(format!("expected {n} head counts")));
        }
        if self.priors.len() != n {
            return Err(Error::Config(format!("expected {n} priors, got {}", self.priors.len())));
        }
        if self.priors.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("priors must be positive".into()));
        }
        if self.n_classes == 0 || self.mlp_ratio == 0 || self.stage_channels.contains(&0) || self.scale_channels.contains(&0) {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        let deepest = self.stride(n - 1);
        if !self.image_size.is_multiple_of(deepest) || self.image_size / deepest < 4 {
            return Err(Error::Config(format!(
                "image size {} gives a deepest grid below 4x4 (stride {deepest})",
                self.image_size
            )));
        }
        for s in self.scales()? {
            s.reasoning().validate()?;
        }
        Ok(())
    }

    /// Prediction channels per cell: objectness, 4 box offsets, classes.
    pub fn pred_channels(&self) -> usize {
        5 + self.n_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bound: f64,
        bias: T,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.w");
        let w = Tensor::uniform(&[c_out, c_in, k, k], bound, &mut param_rng(seed, &wname));
        ConvLayer {
            w: store.add(wname, w),
            b: store.add(format!("{name}.b"), Tensor::full(&[c_out], bias)),
            stride,
            pad: k / 2,
        }
    }

    /// He-uniform weights for a leaky-ReLU conv.
    fn he<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, seed: u64) -> Self {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        Self::new(store, name, c_in, c_out, k, stride, bound, T::zero(), seed)
    }

    fn apply<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(tape.param(store, self.w), tape.param(store, self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadParams {
    conv: ConvLayer,
    out: ConvLayer,
}

/// Per-pass products of [`Detector::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput<'t, T: Scalar> {
    /// Neck grids, finest first, `[B, d_i, H_i, W_i]`.
    pub neck: Vec<Var<'t, T>>,
    /// What each head consumed (neck or reasoner output).
    pub head_inputs: Vec<Var<'t, T>>,
    /// Raw head outputs `[B, 5 + n_classes, H_i, W_i]`.
    pub predictions: Vec<Var<'t, T>>,
    /// Attention weights `[B·heads, n, n]` per scale for reasoner variants.
    pub attention: Vec<Option<Var<'t, T>>>,
}

/// Complete detector with its parameters.
#[derive(Debug, Clone)]
pub struct Detector<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    backbone: Vec<(ConvLayer, Option<ConvLayer>)>,
    neck: Vec<ConvLayer>,
    reasoners: Vec<ReasonerParams>,
    heads: Vec<HeadParams>,
}

impl<T: Scalar> Detector<T> {
    /// Builds and initialises a model. Each parameter's initial value is a
    /// function of `(seed, parameter name)`, so the modules shared by all
    /// variants start identical for equal seeds.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let n = config.n_scales();
        let ch = &config.stage_channels;

        let mut backbone = Vec::with_capacity(ch.len());
        let mut c_in = 3;
        for (i, &c) in ch.iter().enumerate() {
            let down = ConvLayer::he(&mut store, &format!("backbone.{i}.down"), c_in, c, 3, 2, seed);
            let refine = (i >= 2).then(|| ConvLayer::he(&mut store, &format!("backbone.{i}.refine"), c, c, 3, 1, seed));
            backbone.push((down, refine));
            c_in = c;
        }

        let mut neck = Vec::with_capacity(n);
        for s in 0..n {
            let stage_c = ch[s + 2];
            let c_in = if s + 1 < n { stage_c + config.scale_channels[s + 1] } else { stage_c };
            neck.push(ConvLayer::he(&mut store, &format!("neck.{s}"), c_in, config.scale_channels[s], 1, 1, seed));
        }

        let mut reasoners = Vec::new();
        if config.variant.has_reasoning() {
            for sc in config.scales()? {
                let mut rc = sc.reasoning();
                rc.positional_encoding = config.positional_encoding;
                rc.d_hidden = sc.d_feature * config.mlp_ratio;
                reasoners.push(ReasonerParams::new(
                    &mut store,
                    &format!("reasoner.{}", sc.scale_id),
                    config.variant,
                    rc,
                    seed,
                )?);
            }
        }

        let mut heads = Vec::with_capacity(n);
        for s in 0..n {
            let d = config.scale_channels[s];
            let conv = ConvLayer::he(&mut store, &format!("head.{s}.conv"), d, d, 3, 1, seed);
            let out = ConvLayer::new(
                &mut store,
                &format!("head.{s}.out"),
                d,
                config.pred_channels(),
                1,
                1,
                (1.0 / d as f64).sqrt(),
                T::zero(),
                seed,
            );
            // objectness starts near sigmoid(-4)
            let b = store.get_mut(out.b);
            b.value.data_mut()[0] = T::from_f64_lossy(-4.0);
            heads.push(HeadParams { conv, out });
        }

        Ok(Detector {
            config,
            store,
            backbone,
            neck,
            reasoners,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn reasoners(&self) -> &[ReasonerParams] {
        &self.reasoners
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    fn leaky(&self) -> T {
        T::from_f64_lossy(self.config.leaky_slope)
    }

    /// Backbone and neck: one grid per scale, finest first.
    pub fn backbone_neck<'t>(&self, tape: &'t Tape<T>, images: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let s = images.shape();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::shape("backbone", &s, &[3, size, size]));
        }
        let slope = self.leaky();
        let mut x = images;
        let mut stages = Vec::with_capacity(self.backbone.len());
        for (down, refine) in &self.backbone {
            x = down.apply(tape, &self.store, x)?.leaky_relu(slope);
            if let Some(r) = refine {
                x = r.apply(tape, &self.store, x)?.leaky_relu(slope);
            }
            stages.push(x);
        }
        let n = self.config.n_scales();
        let mut out: Vec<Option<Var<'t, T>>> = vec![None; n];
        for s in (0..n).rev() {
            let stage = stages[s + 2];
            let input = match out.get(s + 1).copied().flatten() {
                Some(coarser) => tape.concat(&[coarser.upsample2x()?, stage], 1)?,
                None => stage,
            };
            out[s] = Some(self.neck[s].apply(tape, &self.store, input)?.leaky_relu(slope));
        }
        Ok(out.into_iter().map(|v| v.expect("every scale filled")).collect())
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, images: Var<'t, T>) -> Result<ForwardOutput<'t, T>> {
        let neck = self.backbone_neck(tape, images)?;
        let slope = self.leaky();
        let mut head_inputs = Vec::with_capacity(neck.len());
        let mut attention = Vec::with_capacity(neck.len());
        let mut predictions = Vec::with_capacity(neck.len());
        for (s, &grid) in neck.iter().enumerate() {
            let (features, attn) = match self.reasoners.get(s) {
                Some(r) => {
                    let o = r.forward(tape, &self.store, grid)?;
                    (o.features, Some(o.attention))
                }
                None => (grid, None),
            };
            let h = &self.heads[s];
            let hidden = h.conv.apply(tape, &self.store, features)?.leaky_relu(slope);
            predictions.push(h.out.apply(tape, &self.store, hidden)?);
            head_inputs.push(features);
            attention.push(attn);
        }
        Ok(ForwardOutput {
            neck,
            head_inputs,
            predictions,
            attention,
        })
    }

    /// Sets every Reasoner2 fuse conv to `[I | 0]` with zero bias and freezes
    /// all reasoner parameters, so the head sees the neck features exactly.
    pub fn freeze_reasoning_as_shortcut(&mut self) -> Result<()> {
        if self.config.variant != Variant::Reasoner2 {
            return Err(Error::Usage("shortcut freezing needs the reasoner2 variant".into()));
        }
        for r in &self.reasoners {
            let d = r.reasoning_config.d_feature;
            let mut w = Tensor::zeros(&[d, 2 * d]);
            for i in 0..d {
                w.set(&[i, i], T::one());
            }
            self.store.set_value(r.fuse_w, w)?;
            self.store.set_value(r.fuse_b, Tensor::zeros(&[d]))?;
            for id in r.ids() {
                self.store.set_requires_grad(id, false);
            }
        }
        Ok(())
    }

    /// Sequential inference on one batch of scenes: forward, decode,
    /// confidence filter and NMS.
    pub fn detect_chunk(&self, chunk: &[Scenario], conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        let scales = self.config.scales()?;
        let tape = Tape::inference();
        let images = tape.constant(images_to_tensor(chunk)?);
        let fwd = self.forward(&tape, images)?;
        let preds: Vec<Tensor<T>> = fwd.predictions.iter().map(|p| p.value().clone()).collect();
        let mut out = Vec::with_capacity(chunk.len());
        for b in 0..chunk.len() {
            let mut dets = Vec::new();
            for (s, p) in preds.iter().enumerate() {
                let per = p.len() / chunk.len();
                let img = Tensor::new(&p.shape()[1..], p.data()[b * per..(b + 1) * per].to_vec())?;
                dets.extend(
                    decode_grid(&img, &scales[s], self.config.stride(s), self.config.priors[s])?
                        .into_iter()
                        .filter(|d| d.score >= conf_threshold),
                );
            }
            out.push(nms(dets, nms_iou));
        }
        Ok(out)
    }

    /// Runs inference on scenes in batches and returns post-NMS detections
    /// per scene.
    pub fn detect(&self, scenes: &[Scenario], conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        const CHUNK: usize = 16;
        let per_chunk: Vec<Result<Vec<Vec<Detection>>>> = scenes
            .par_chunks(CHUNK)
            .map(|chunk| self.detect_chunk(chunk, conf_threshold, nms_iou))
            .collect();
        let mut out = Vec::with_capacity(scenes.len());
        for r in per_chunk {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Stacks scene images into a `[B, 3, S, S]` tensor.
pub fn images_to_tensor<T: Scalar>(scenes: &[Scenario]) -> Result<Tensor<T>> {
    let first = scenes.first().ok_or_else(|| Error::Usage("empty image batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(scenes.len() * first.image.len());
    for s in scenes {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("image batch", &shape, s.image.shape()));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let mut full = vec![scenes.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}
