//! Between-stage token fusion.
//!
//! The tokens a finished stage produced are aligned to the next stage's
//! width and blended into its fresh embeddings:
//!
//!   fused = alpha · align(z_prev) + fresh
//!
//! where `align` is a learnable linear projection (the default) or one of
//! the parameter-free variants (zero padding at either end, channel
//! repetition). `alpha` is an unconstrained learnable scalar; with the
//! default `alpha_init = 0` the first forward after initialization is
//! independent of the recycled tokens, bit for bit.
//!
//! All P+1 tokens are fused, class token included, so the wider round's
//! class token inherits the previous round's aggregate instead of
//! starting fresh.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};
use crate::vit::{trunc_normal, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Learnable d_i -> d_j projection with bias.
    Linear,
    /// Zeros in the leading channels, previous tokens in the trailing ones.
    PadFrontZeros,
    /// Previous tokens in the leading channels, zeros after.
    PadBackZeros,
    /// Tile channels: out[c] = z[c mod d_i].
    Repeat,
}

impl Default for FusionStrategy {
    fn default() -> Self {
        FusionStrategy::Linear
    }
}

/// Live fusion parameters for one consecutive stage transition.
#[derive(Clone)]
pub struct Transition {
    pub from_stage: usize,
    pub to_stage: usize,
    pub strategy: FusionStrategy,
    pub alpha: Tensor,              // [1]
    pub proj_weight: Option<Tensor>, // [d_i, d_j], linear strategy only
    pub proj_bias: Option<Tensor>,   // [d_j]
}

fn trunc_normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, trunc_normal(rng, std, n))
}

/// Build the fusion parameters for the transition `from_stage -> to_stage`.
/// Transitions exist only between consecutive stages.
pub fn make_transition(
    cfg: &ModelConfig,
    from_stage: usize,
    to_stage: usize,
    strategy: FusionStrategy,
    alpha_init: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Transition> {
    if to_stage >= cfg.num_stages() {
        return Err(Error::Config(format!(
            "transition target stage {to_stage} out of range ({} stages)",
            cfg.num_stages()
        )));
    }
    if to_stage != from_stage + 1 {
        return Err(Error::Config(format!(
            "transitions connect consecutive stages only, got {from_stage} -> {to_stage}"
        )));
    }
    let (di, dj) = (cfg.embed_dim(from_stage), cfg.embed_dim(to_stage));
    let (proj_weight, proj_bias) = match strategy {
        FusionStrategy::Linear => (
            Some(trunc_normal_tensor(rng, vec![di, dj], 0.02)?),
            Some(Tensor::param(vec![dj], vec![0.0; dj])?),
        ),
        _ => (None, None),
    };
    Ok(Transition {
        from_stage,
        to_stage,
        strategy,
        alpha: Tensor::param(vec![1], vec![alpha_init])?,
        proj_weight,
        proj_bias,
    })
}

/// Build one transition per consecutive stage pair.
pub fn make_transitions(
    cfg: &ModelConfig,
    strategy: FusionStrategy,
    alpha_init: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Transition>> {
    (0..cfg.num_stages().saturating_sub(1))
        .map(|i| make_transition(cfg, i, i + 1, strategy, alpha_init, rng))
        .collect()
}

impl Transition {
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let idx = self.from_stage;
        let mut out = vec![(format!("transitions.{idx}.alpha"), self.alpha.clone())];
        if let Some(w) = &self.proj_weight {
            out.push((format!("transitions.{idx}.proj.weight"), w.clone()));
        }
        if let Some(b) = &self.proj_bias {
            out.push((format!("transitions.{idx}.proj.bias"), b.clone()));
        }
        out
    }

    pub fn alpha_value(&self) -> f32 {
        self.alpha.data()[0]
    }
}

/// fused = alpha · align(z_prev) + fresh.
///
/// `z_prev` is [B, P+1, d_i] from the previous stage, `fresh` is
/// [B, P+1, d_j] from `embed_stage` at the wider width; requires
/// d_i < d_j and equal token counts.
pub fn fuse(g: &mut Graph, z_prev: &Tensor, fresh: &Tensor, t: &Transition) -> Result<Tensor> {
    let (sz, sf) = (z_prev.shape(), fresh.shape());
    if sz.len() != 3 || sf.len() != 3 {
        return Err(Error::Input(format!(
            "fuse expects [B,T,d] tensors, got {sz:?} and {sf:?}"
        )));
    }
    let (di, dj) = (sz[2], sf[2]);
    if di >= dj {
        return Err(Error::Config(format!(
            "fusion requires d_i < d_j, got {di} -> {dj}"
        )));
    }
    if sz[0] != sf[0] || sz[1] != sf[1] {
        return Err(Error::Input(format!(
            "fuse token mismatch: {sz:?} vs {sf:?}"
        )));
    }
    let aligned = match t.strategy {
        FusionStrategy::Linear => {
            let w = t.proj_weight.as_ref().ok_or_else(|| {
                Error::Config("linear fusion strategy without a projection".into())
            })?;
            let ws = w.shape();
            if ws != vec![di, dj] {
                return Err(Error::Config(format!(
                    "projection shape {ws:?} does not match transition {di} -> {dj}"
                )));
            }
            g.linear(z_prev, w, t.proj_bias.as_ref())?
        }
        FusionStrategy::PadFrontZeros => g.pad_channels(z_prev, dj, true)?,
        FusionStrategy::PadBackZeros => g.pad_channels(z_prev, dj, false)?,
        FusionStrategy::Repeat => g.repeat_channels(z_prev, dj)?,
    };
    let scaled = g.scale_by(&aligned, &t.alpha)?;
    g.add(&scaled, fresh)
}
