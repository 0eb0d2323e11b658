//! The two reasoner configurations placed between neck and head.
//!
//! * Reasoner1: `conv1x1(reasoning(neck))`.
//! * Reasoner2: `conv1x1(concat_channels(neck, reasoning(neck)))`, fusing
//!   `2·d → d` so every variant feeds the head the same depth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{param_rng, ParamId, ParamStore};
use crate::reasoning::{reasoning_forward, ReasoningConfig, ReasoningLayerParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which feature path feeds the detection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Reasoner1,
    Reasoner2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Reasoner1, Variant::Reasoner2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Reasoner1 => "reasoner1",
            Variant::Reasoner2 => "reasoner2",
        }
    }

    pub fn has_reasoning(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "reasoner1" => Ok(Variant::Reasoner1),
            "reasoner2" => Ok(Variant::Reasoner2),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected baseline, reasoner1 or reasoner2)"
            ))),
        }
    }
}

/// One detection scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub scale_id: usize,
    pub grid_hw: (usize, usize),
    pub d_feature: usize,
    pub n_heads: usize,
}

impl ScaleConfig {
    /// Scale whose head count keeps every head `head_width` wide.
    pub fn with_head_width(scale_id: usize, grid_hw: (usize, usize), d_feature: usize, head_width: usize) -> Result<Self> {
        if head_width == 0 || !d_feature.is_multiple_of(head_width) {
            return Err(Error::Config(format!(
                "scale {scale_id}: depth {d_feature} is not a multiple of the head width {head_width}"
            )));
        }
        Ok(ScaleConfig {
            scale_id,
            grid_hw,
            d_feature,
            n_heads: d_feature / head_width,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d_feature / self.n_heads
    }

    pub fn reasoning(&self) -> ReasoningConfig {
        ReasoningConfig::new(self.d_feature, self.n_heads)
    }
}

/// Per-pixel linear map across channels: `[B, C_in, H, W]` with
/// `[C_out, C_in]` weights and a `[C_out]` bias.
pub fn conv1x1<'t, T: Scalar>(grid: Var<'t, T>, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let ws = weight.shape();
    let gs = grid.shape();
    if ws.len() != 2 || gs.len() != 4 || ws[1] != gs[1] {
        return Err(Error::shape("conv1x1", &gs, &ws));
    }
    grid.conv2d(weight.reshape(&[ws[0], ws[1], 1, 1])?, bias, 1, 0)
}

/// Reasoning layer plus 1×1 fuse conv for one scale.
#[derive(Debug, Clone)]
pub struct ReasonerParams {
    pub variant: Variant,
    pub reasoning_config: ReasoningConfig,
    pub reasoning: ReasoningLayerParams,
    /// `[d, d]` for Reasoner1, `[d, 2d]` for Reasoner2.
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl ReasonerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        variant: Variant,
        reasoning_config: ReasoningConfig,
        seed: u64,
    ) -> Result<Self> {
        let d = reasoning_config.d_feature;
        let c_in = match variant {
            Variant::Baseline => {
                return Err(Error::Usage("the baseline variant has no reasoner".into()));
            }
            Variant::Reasoner1 => d,
            Variant::Reasoner2 => 2 * d,
        };
        let reasoning = ReasoningLayerParams::new(store, &format!("{prefix}.reasoning"), &reasoning_config, seed)?;
        let wname = format!("{prefix}.fuse.w");
        let bound = (6.0 / c_in as f64).sqrt();
        let w = Tensor::uniform(&[d, c_in], bound, &mut param_rng(seed, &wname));
        let fuse_w = store.add(wname, w);
        let fuse_b = store.add(format!("{prefix}.fuse.b"), Tensor::zeros(&[d]));
        Ok(ReasonerParams {
            variant,
            reasoning_config,
            reasoning,
            fuse_w,
            fuse_b,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.reasoning.ids().to_vec();
        ids.push(self.fuse_w);
        ids.push(self.fuse_b);
        ids
    }

    pub fn count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.ids().iter().map(|&id| store.value(id).len()).sum()
    }

    /// Applies the configured reasoner to `[B, d, H, W]` neck features.
    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, neck: Var<'t, T>) -> Result<ReasonerOutput<'t, T>> {
        let bound = self.reasoning.bind(tape, store, &self.reasoning_config);
        let w = tape.param(store, self.fuse_w);
        let b = tape.param(store, self.fuse_b);
        let r = reasoning_forward(neck, &bound)?;
        let fused = match self.variant {
            Variant::Reasoner1 => reasoner1_fuse(r.grid, w, b)?,
            Variant::Reasoner2 => reasoner2_fuse(neck, r.grid, w, b)?,
            Variant::Baseline => unreachable!("constructor rejects baseline"),
        };
        Ok(ReasonerOutput {
            features: fused,
            reasoning: r.grid,
            attention: r.attention,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReasonerOutput<'t, T: Scalar> {
    /// Features handed to the detection head.
    pub features: Var<'t, T>,
    /// Reasoning-layer output before the fuse conv.
    pub reasoning: Var<'t, T>,
    pub attention: Var<'t, T>,
}

/// Reasoner1 head input: `conv1x1(reasoning)`.
pub fn reasoner1_fuse<'t, T: Scalar>(reasoning: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    conv1x1(reasoning, w, b)
}

/// Reasoner2 head input: `conv1x1([neck, reasoning])`, channel order fixed
/// as neck first.
pub fn reasoner2_fuse<'t, T: Scalar>(neck: Var<'t, T>, reasoning: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let cat = neck.tape().concat(&[neck, reasoning], 1)?;
    conv1x1(cat, w, b)
}
