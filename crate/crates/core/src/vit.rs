//! Prefix-sliceable Vision Transformer.
//!
//! One full-width parameter set hosts every stage: stage `i` (with `h_i`
//! heads and embedding width `d_i = h_i · head_dim`) sees the leading
//! rows/columns of every tensor. QKV weights are stored head-major (head
//! `h` owns columns `[h·3·head_dim, (h+1)·3·head_dim)` as q|k|v), so the
//! first `h_i` heads are a contiguous column prefix and stage views are
//! plain leading-index rectangles everywhere.
//!
//! Blocks are pre-norm: `x += attn(ln(x))`, then `x += mlp(ln(x))`, with
//! an MLP hidden width of `mlp_ratio · d` and exact-erf GELU. The
//! classifier and final norm are shared slices, not per-stage heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::entropy_from_logits;
use crate::tensor::{Graph, Tensor};

/// One thinking stage: head count plus its weight in the joint loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub heads: usize,
    #[serde(default = "default_loss_weight")]
    pub loss_weight: f32,
}

fn default_loss_weight() -> f32 {
    1.0
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_eps() -> f32 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    pub head_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_eps")]
    pub eps: f32,
    pub stages: Vec<StageSpec>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for w in self.stages.windows(2) {
            if w[0].heads >= w[1].heads {
                return Err(Error::Config(format!(
                    "stage heads must be strictly increasing, got {} then {}",
                    w[0].heads, w[1].heads
                )));
            }
        }
        if self.stages[0].heads == 0 {
            return Err(Error::Config("stage heads must be positive".into()));
        }
        if self.stages.iter().any(|s| s.loss_weight < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.stages.iter().all(|s| s.loss_weight == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Tokens per sequence: patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn embed_dim(&self, stage: usize) -> usize {
        self.stages[stage].heads * self.head_dim
    }

    pub fn full_dim(&self) -> usize {
        self.embed_dim(self.stages.len() - 1)
    }

    pub fn patch_input_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn loss_weights(&self) -> Vec<f32> {
        self.stages.iter().map(|s| s.loss_weight).collect()
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage >= self.stages.len() {
            return Err(Error::Config(format!(
                "unknown stage {} (model has {} stages)",
                stage,
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// Config restricted to the first `stage + 1` stages; geometry is
    /// unchanged, so stage views of the truncated model match the
    /// original bit for bit.
    pub fn truncated(&self, stage: usize) -> Result<ModelConfig> {
        self.check_stage(stage)?;
        let mut cfg = self.clone();
        cfg.stages.truncate(stage + 1);
        Ok(cfg)
    }
}

#[derive(Clone)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_in_weight: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out_weight: Tensor,
    pub mlp_out_bias: Tensor,
}

/// Full-size parameter set; every stage is a leading-index view of it.
#[derive(Clone)]
pub struct NestedWeights {
    pub patch_weight: Tensor, // [3·p², d]
    pub patch_bias: Tensor,   // [d]
    pub pos_embed: Tensor,    // [P+1, d]; row 0 is the class-token slot
    pub cls_token: Tensor,    // [1, d]
    pub layers: Vec<LayerWeights>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_weight: Tensor, // [d, C]
    pub head_bias: Tensor,   // [C]
}

/// Box–Muller truncated normal: resample anything outside ±2σ.
pub(crate) fn trunc_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f32> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        for z in [r * theta.cos(), r * theta.sin()] {
            if z.abs() <= 2.0 && out.len() < n {
                out.push((z * std) as f32);
            }
        }
    }
    out
}

const INIT_STD: f64 = 0.02;

impl NestedWeights {
    /// Truncated-normal (std 0.02) weights, zero biases, unit norms.
    /// Draw order is the `named_tensors` order, so a seed pins every
    /// value.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<NestedWeights> {
        cfg.validate()?;
        let d = cfg.full_dim();
        let pin = cfg.patch_input_dim();
        let p1 = cfg.seq_len();
        let c = cfg.num_classes;
        let md = cfg.mlp_ratio * d;
        let normal = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::param(shape, trunc_normal(rng, INIT_STD, n))
        };
        let zeros = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::param(shape, vec![0.0; n])
        };
        let ones = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::param(shape, vec![1.0; n])
        };
        let patch_weight = normal(rng, vec![pin, d])?;
        let patch_bias = zeros(vec![d])?;
        let pos_embed = normal(rng, vec![p1, d])?;
        let cls_token = normal(rng, vec![1, d])?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            layers.push(LayerWeights {
                ln1_gamma: ones(vec![d])?,
                ln1_beta: zeros(vec![d])?,
                qkv_weight: normal(rng, vec![d, 3 * d])?,
                qkv_bias: zeros(vec![3 * d])?,
                out_weight: normal(rng, vec![d, d])?,
                out_bias: zeros(vec![d])?,
                ln2_gamma: ones(vec![d])?,
                ln2_beta: zeros(vec![d])?,
                mlp_in_weight: normal(rng, vec![d, md])?,
                mlp_in_bias: zeros(vec![md])?,
                mlp_out_weight: normal(rng, vec![md, d])?,
                mlp_out_bias: zeros(vec![d])?,
            });
        }
        let norm_gamma = ones(vec![d])?;
        let norm_beta = zeros(vec![d])?;
        let head_weight = normal(rng, vec![d, c])?;
        let head_bias = zeros(vec![c])?;
        Ok(NestedWeights {
            patch_weight,
            patch_bias,
            pos_embed,
            cls_token,
            layers,
            norm_gamma,
            norm_beta,
            head_weight,
            head_bias,
        })
    }

    /// Stable (name, tensor) inventory; checkpoint layout and optimizer
    /// slot order both follow it.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("patch.weight".to_string(), self.patch_weight.clone()),
            ("patch.bias".to_string(), self.patch_bias.clone()),
            ("pos_embed".to_string(), self.pos_embed.clone()),
            ("cls_token".to_string(), self.cls_token.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gamma"), l.ln1_gamma.clone()));
            out.push((format!("layers.{i}.ln1.beta"), l.ln1_beta.clone()));
            out.push((format!("layers.{i}.attn.qkv_weight"), l.qkv_weight.clone()));
            out.push((format!("layers.{i}.attn.qkv_bias"), l.qkv_bias.clone()));
            out.push((format!("layers.{i}.attn.out_weight"), l.out_weight.clone()));
            out.push((format!("layers.{i}.attn.out_bias"), l.out_bias.clone()));
            out.push((format!("layers.{i}.ln2.gamma"), l.ln2_gamma.clone()));
            out.push((format!("layers.{i}.ln2.beta"), l.ln2_beta.clone()));
            out.push((format!("layers.{i}.mlp.in_weight"), l.mlp_in_weight.clone()));
            out.push((format!("layers.{i}.mlp.in_bias"), l.mlp_in_bias.clone()));
            out.push((format!("layers.{i}.mlp.out_weight"), l.mlp_out_weight.clone()));
            out.push((format!("layers.{i}.mlp.out_bias"), l.mlp_out_bias.clone()));
        }
        out.push(("norm.gamma".to_string(), self.norm_gamma.clone()));
        out.push(("norm.beta".to_string(), self.norm_beta.clone()));
        out.push(("head.weight".to_string(), self.head_weight.clone()));
        out.push(("head.bias".to_string(), self.head_bias.clone()));
        out
    }
}

/// Stage-sized parameter views. Built per graph so gradients flow back
/// into the full tensors through the slice ops.
pub struct StageView {
    pub stage: usize,
    pub heads: usize,
    pub embed: usize,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub pos_cls: Tensor,     // [1, d]
    pub pos_patches: Tensor, // [P, d]
    pub cls_token: Tensor,   // [1, d]
    pub layers: Vec<LayerWeights>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Leading-index views of every tensor for the given stage. Stage `n-1`
/// returns the full tensors unchanged.
pub fn slice_stage(
    g: &mut Graph,
    w: &NestedWeights,
    cfg: &ModelConfig,
    stage: usize,
) -> Result<StageView> {
    cfg.check_stage(stage)?;
    let d = cfg.embed_dim(stage);
    let pin = cfg.patch_input_dim();
    let p1 = cfg.seq_len();
    let md = cfg.mlp_ratio * d;
    let c = cfg.num_classes;
    let mut layers = Vec::with_capacity(w.layers.len());
    for l in &w.layers {
        layers.push(LayerWeights {
            ln1_gamma: g.slice_1d(&l.ln1_gamma, d)?,
            ln1_beta: g.slice_1d(&l.ln1_beta, d)?,
            qkv_weight: g.slice_2d(&l.qkv_weight, 0, d, 0, 3 * d)?,
            qkv_bias: g.slice_1d(&l.qkv_bias, 3 * d)?,
            out_weight: g.slice_2d(&l.out_weight, 0, d, 0, d)?,
            out_bias: g.slice_1d(&l.out_bias, d)?,
            ln2_gamma: g.slice_1d(&l.ln2_gamma, d)?,
            ln2_beta: g.slice_1d(&l.ln2_beta, d)?,
            mlp_in_weight: g.slice_2d(&l.mlp_in_weight, 0, d, 0, md)?,
            mlp_in_bias: g.slice_1d(&l.mlp_in_bias, md)?,
            mlp_out_weight: g.slice_2d(&l.mlp_out_weight, 0, md, 0, d)?,
            mlp_out_bias: g.slice_1d(&l.mlp_out_bias, d)?,
        });
    }
    Ok(StageView {
        stage,
        heads: cfg.stages[stage].heads,
        embed: d,
        patch_weight: g.slice_2d(&w.patch_weight, 0, pin, 0, d)?,
        patch_bias: g.slice_1d(&w.patch_bias, d)?,
        pos_cls: g.slice_2d(&w.pos_embed, 0, 1, 0, d)?,
        pos_patches: g.slice_2d(&w.pos_embed, 1, p1, 0, d)?,
        cls_token: g.slice_2d(&w.cls_token, 0, 1, 0, d)?,
        layers,
        norm_gamma: g.slice_1d(&w.norm_gamma, d)?,
        norm_beta: g.slice_1d(&w.norm_beta, d)?,
        head_weight: g.slice_2d(&w.head_weight, 0, d, 0, c)?,
        head_bias: g.slice_1d(&w.head_bias, c)?,
    })
}

/// Flatten [B,3,H,W] images into per-patch pixel vectors [B,P,3·p²].
/// Patch pixel order is (channel, dy, dx); pure data movement, no grad.
pub fn extract_patches(images: &Tensor, image_size: usize, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != image_size || s[3] != image_size {
        return Err(Error::Input(format!(
            "expected images of shape [B,3,{image_size},{image_size}], got {s:?}"
        )));
    }
    let b = s[0];
    let per_side = image_size / patch;
    let p = per_side * per_side;
    let pin = 3 * patch * patch;
    let xd = images.data();
    let mut out = Vec::with_capacity(b * p * pin);
    for bi in 0..b {
        for py in 0..per_side {
            for px in 0..per_side {
                for ch in 0..3 {
                    for dy in 0..patch {
                        let y = py * patch + dy;
                        let row = bi * 3 * image_size * image_size
                            + ch * image_size * image_size
                            + y * image_size
                            + px * patch;
                        out.extend_from_slice(&xd[row..row + patch]);
                    }
                }
            }
        }
    }
    drop(xd);
    Tensor::from_vec(vec![b, p, pin], out)
}

/// Sliced patch projection plus positional rows: [B,P,3·p²] -> [B,P,d].
/// The class token (with its positional row) is prepended by
/// [`embed_stage`].
pub fn patch_embed(g: &mut Graph, patches: &Tensor, view: &StageView) -> Result<Tensor> {
    let x = g.linear(patches, &view.patch_weight, Some(&view.patch_bias))?;
    g.add_rows(&x, &view.pos_patches)
}

/// Fresh stage embedding including the class token: [B,P+1,d].
pub fn embed_stage(g: &mut Graph, patches: &Tensor, view: &StageView) -> Result<Tensor> {
    let x = patch_embed(g, patches, view)?;
    let tok = g.add(&view.cls_token, &view.pos_cls)?;
    g.prepend_token(&x, &tok)
}

pub struct StageOutput {
    pub logits: Tensor, // [B, C]
    /// Block-stack output z at the last layer, ahead of the
    /// classification norm; this is what later stages fuse with.
    pub tokens: Tensor, // [B, T, d]
    pub entropy: Vec<f64>,
    pub stage_index: usize,
}

/// Run the stage's transformer blocks and classifier over tokens that
/// already include the class token.
pub fn forward_stage(
    g: &mut Graph,
    tokens: &Tensor,
    view: &StageView,
    cfg: &ModelConfig,
) -> Result<StageOutput> {
    let s = tokens.shape();
    if s.len() != 3 || s[2] != view.embed {
        return Err(Error::Input(format!(
            "stage {} expects token width {}, got shape {:?}",
            view.stage, view.embed, s
        )));
    }
    let eps = cfg.eps;
    let mut x = tokens.clone();
    for l in &view.layers {
        let h = g.layernorm(&x, &l.ln1_gamma, &l.ln1_beta, eps)?;
        let qkv = g.linear(&h, &l.qkv_weight, Some(&l.qkv_bias))?;
        let att = g.attention(&qkv, view.heads, cfg.head_dim)?;
        let att = g.linear(&att, &l.out_weight, Some(&l.out_bias))?;
        x = g.add(&x, &att)?;
        let h = g.layernorm(&x, &l.ln2_gamma, &l.ln2_beta, eps)?;
        let m = g.linear(&h, &l.mlp_in_weight, Some(&l.mlp_in_bias))?;
        let m = g.gelu(&m)?;
        let m = g.linear(&m, &l.mlp_out_weight, Some(&l.mlp_out_bias))?;
        x = g.add(&x, &m)?;
    }
    let normed = g.layernorm(&x, &view.norm_gamma, &view.norm_beta, eps)?;
    let cls = g.first_token(&normed)?;
    let logits = g.linear(&cls, &view.head_weight, Some(&view.head_bias))?;
    let entropy = {
        let ld = logits.data();
        let c = cfg.num_classes;
        (0..s[0]).map(|b| entropy_from_logits(&ld[b * c..(b + 1) * c])).collect()
    };
    Ok(StageOutput {
        logits,
        tokens: x,
        entropy,
        stage_index: view.stage,
    })
}

/// Convenience: embed then run one stage from raw patch vectors.
pub fn run_stage_fresh(
    g: &mut Graph,
    patches: &Tensor,
    w: &NestedWeights,
    cfg: &ModelConfig,
    stage: usize,
) -> Result<StageOutput> {
    let view = slice_stage(g, w, cfg, stage)?;
    let tokens = embed_stage(g, patches, &view)?;
    forward_stage(g, &tokens, &view, cfg)
}

fn copy_block(src: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let s = src.shape();
    let d = src.data();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend_from_slice(&d[r * s[1]..r * s[1] + cols]);
    }
    drop(d);
    Tensor::param(vec![rows, cols], out)
}

fn copy_prefix(src: &Tensor, n: usize) -> Result<Tensor> {
    Tensor::param(vec![n], src.data()[..n].to_vec())
}

/// Copy the stage-sized slice out into a standalone parameter set. The
/// result, forwarded at its own full width, must match `forward_stage`
/// on the nested weights bit for bit.
pub fn materialize_stage(
    w: &NestedWeights,
    cfg: &ModelConfig,
    stage: usize,
) -> Result<NestedWeights> {
    cfg.check_stage(stage)?;
    let d = cfg.embed_dim(stage);
    let pin = cfg.patch_input_dim();
    let p1 = cfg.seq_len();
    let md = cfg.mlp_ratio * d;
    let c = cfg.num_classes;
    let mut layers = Vec::with_capacity(w.layers.len());
    for l in &w.layers {
        layers.push(LayerWeights {
            ln1_gamma: copy_prefix(&l.ln1_gamma, d)?,
            ln1_beta: copy_prefix(&l.ln1_beta, d)?,
            qkv_weight: copy_block(&l.qkv_weight, d, 3 * d)?,
            qkv_bias: copy_prefix(&l.qkv_bias, 3 * d)?,
            out_weight: copy_block(&l.out_weight, d, d)?,
            out_bias: copy_prefix(&l.out_bias, d)?,
            ln2_gamma: copy_prefix(&l.ln2_gamma, d)?,
            ln2_beta: copy_prefix(&l.ln2_beta, d)?,
            mlp_in_weight: copy_block(&l.mlp_in_weight, d, md)?,
            mlp_in_bias: copy_prefix(&l.mlp_in_bias, md)?,
            mlp_out_weight: copy_block(&l.mlp_out_weight, md, d)?,
            mlp_out_bias: copy_prefix(&l.mlp_out_bias, d)?,
        });
    }
    Ok(NestedWeights {
        patch_weight: copy_block(&w.patch_weight, pin, d)?,
        patch_bias: copy_prefix(&w.patch_bias, d)?,
        pos_embed: copy_block(&w.pos_embed, p1, d)?,
        cls_token: copy_block(&w.cls_token, 1, d)?,
        layers,
        norm_gamma: copy_prefix(&w.norm_gamma, d)?,
        norm_beta: copy_prefix(&w.norm_beta, d)?,
        head_weight: copy_block(&w.head_weight, d, c)?,
        head_bias: copy_prefix(&w.head_bias, c)?,
    })
}

/// Exact parameter count of the stage-sized subnetwork.
pub fn count_params(cfg: &ModelConfig, stage: usize) -> Result<u64> {
    cfg.check_stage(stage)?;
    let d = cfg.embed_dim(stage) as u64;
    let pin = cfg.patch_input_dim() as u64;
    let p1 = cfg.seq_len() as u64;
    let c = cfg.num_classes as u64;
    let md = cfg.mlp_ratio as u64 * d;
    let l = cfg.num_layers as u64;
    let embed = pin * d + d + p1 * d + d;
    let per_layer = 2 * d           // ln1
        + d * 3 * d + 3 * d          // qkv
        + d * d + d                  // attention out
        + 2 * d                      // ln2
        + d * md + md                // mlp in
        + md * d + d; // mlp out
    let head = 2 * d + d * c + c;
    Ok(embed + l * per_layer + head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_config(heads: &[usize]) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            num_layers: 1,
            head_dim: 4,
            num_classes: 3,
            mlp_ratio: 4,
            eps: 1e-6,
            stages: heads.iter().map(|&h| StageSpec { heads: h, loss_weight: 1.0 }).collect(),
        }
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn patch_count_for_deit_geometry() {
        let mut cfg = toy_config(&[1]);
        cfg.image_size = 224;
        cfg.patch_size = 16;
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.seq_len(), 197);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = toy_config(&[1, 2]);
        cfg.image_size = 9;
        assert!(cfg.validate().is_err());
        let cfg = toy_config(&[2, 2]);
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config(&[1, 2]);
        cfg.stages[0].loss_weight = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config(&[1, 2]);
        for s in &mut cfg.stages {
            s.loss_weight = 0.0;
        }
        assert!(cfg.validate().is_err());
        assert!(toy_config(&[1, 2]).validate().is_ok());
    }

    #[test]
    fn zero_image_embeds_to_positional_rows() {
        let cfg = toy_config(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        // patch bias is zero-initialized, so a zero image leaves only pos rows
        let images = Tensor::zeros(vec![1, 3, 8, 8]);
        let patches = extract_patches(&images, 8, 4).unwrap();
        let mut g = Graph::inference();
        let view = slice_stage(&mut g, &w, &cfg, 0).unwrap();
        let x = patch_embed(&mut g, &patches, &view).unwrap();
        assert_eq!(x.shape(), vec![1, 4, 4]);
        let pos = view.pos_patches.to_vec();
        assert_eq!(bits(&x.to_vec()), bits(&pos));
    }

    #[test]
    fn stage_embeddings_are_channel_prefixes_of_wider_stages() {
        let cfg = toy_config(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        let images = Tensor::from_vec(
            vec![1, 3, 8, 8],
            (0..192).map(|i| ((i * 13 + 1) % 29) as f32 / 29.0).collect(),
        )
        .unwrap();
        let patches = extract_patches(&images, 8, 4).unwrap();
        let mut g = Graph::inference();
        let v0 = slice_stage(&mut g, &w, &cfg, 0).unwrap();
        let v1 = slice_stage(&mut g, &w, &cfg, 1).unwrap();
        let e0 = embed_stage(&mut g, &patches, &v0).unwrap();
        let e1 = embed_stage(&mut g, &patches, &v1).unwrap();
        let (d0, d1) = (cfg.embed_dim(0), cfg.embed_dim(1));
        let e0d = e0.to_vec();
        let e1d = e1.to_vec();
        for t in 0..cfg.seq_len() {
            let narrow = &e0d[t * d0..(t + 1) * d0];
            let prefix = &e1d[t * d1..t * d1 + d0];
            assert_eq!(bits(narrow), bits(prefix), "token {t}");
        }
    }

    #[test]
    fn zero_layers_degenerates_to_classifier_on_normed_cls() {
        let mut cfg = toy_config(&[2]);
        cfg.num_layers = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        let images = Tensor::zeros(vec![1, 3, 8, 8]);
        let patches = extract_patches(&images, 8, 4).unwrap();
        let mut g = Graph::inference();
        let out = run_stage_fresh(&mut g, &patches, &w, &cfg, 0).unwrap();
        // Expected: head(layernorm(cls + pos_row0)) computed directly.
        let mut g2 = Graph::inference();
        let view = slice_stage(&mut g2, &w, &cfg, 0).unwrap();
        let tok = g2.add(&view.cls_token, &view.pos_cls).unwrap();
        let normed = g2
            .layernorm(&tok, &view.norm_gamma, &view.norm_beta, cfg.eps)
            .unwrap();
        let logits = g2
            .linear(&normed, &view.head_weight, Some(&view.head_bias))
            .unwrap();
        assert_eq!(bits(&out.logits.to_vec()), bits(&logits.to_vec()));
    }

    #[test]
    fn deit_tiny_output_shapes() {
        let cfg = ModelConfig {
            image_size: 224,
            patch_size: 16,
            num_layers: 12,
            head_dim: 64,
            num_classes: 1000,
            mlp_ratio: 4,
            eps: 1e-6,
            stages: vec![StageSpec { heads: 3, loss_weight: 1.0 }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        let images = Tensor::zeros(vec![1, 3, 224, 224]);
        let patches = extract_patches(&images, 224, 16).unwrap();
        let mut g = Graph::inference();
        let out = run_stage_fresh(&mut g, &patches, &w, &cfg, 0).unwrap();
        assert_eq!(out.logits.shape(), vec![1, 1000]);
        assert_eq!(out.tokens.shape(), vec![1, 197, 192]);
        assert!(out.logits.is_finite());
    }

    #[test]
    fn stage_params_are_leading_blocks_of_wider_stage_params() {
        let cfg = toy_config(&[1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        let small = materialize_stage(&w, &cfg, 0).unwrap();
        let big = materialize_stage(&w, &cfg, 1).unwrap();
        let (d0, _d1) = (cfg.embed_dim(0), cfg.embed_dim(1));
        // Check one 2-d tensor and one 1-d tensor per kind; qkv covers the
        // head-major layout.
        let qs = small.layers[0].qkv_weight.to_vec();
        let qb = big.layers[0].qkv_weight.to_vec();
        let big_cols = big.layers[0].qkv_weight.shape()[1];
        for r in 0..d0 {
            let lhs = &qs[r * 3 * d0..(r + 1) * 3 * d0];
            let rhs = &qb[r * big_cols..r * big_cols + 3 * d0];
            assert_eq!(bits(lhs), bits(rhs), "qkv row {r}");
        }
        let hs = small.head_weight.to_vec();
        let hb = big.head_weight.to_vec();
        assert_eq!(bits(&hs), bits(&hb[..hs.len()]));
        let bs = small.patch_bias.to_vec();
        let bb = big.patch_bias.to_vec();
        assert_eq!(bits(&bs), bits(&bb[..bs.len()]));
    }

    #[test]
    fn materialized_stage_forward_is_bitwise_equal() {
        let cfg = toy_config(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        let images = Tensor::from_vec(
            vec![2, 3, 8, 8],
            (0..384).map(|i| ((i * 7 + 3) % 31) as f32 / 31.0).collect(),
        )
        .unwrap();
        let patches = extract_patches(&images, 8, 4).unwrap();

        let mut g = Graph::inference();
        let nested = run_stage_fresh(&mut g, &patches, &w, &cfg, 0).unwrap();

        let small = materialize_stage(&w, &cfg, 0).unwrap();
        let small_cfg = cfg.truncated(0).unwrap();
        let mut g2 = Graph::inference();
        let standalone = run_stage_fresh(&mut g2, &patches, &small, &small_cfg, 0).unwrap();

        assert_eq!(bits(&nested.logits.to_vec()), bits(&standalone.logits.to_vec()));
        assert_eq!(bits(&nested.tokens.to_vec()), bits(&standalone.tokens.to_vec()));
    }

    #[test]
    fn head_prefix_locality_in_attention() {
        // Zeroing the weights of heads above h1 and running at full width
        // on zero-padded stage-1 tokens reproduces stage-1 attention in
        // the shared channels.
        let cfg = toy_config(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        let (d0, d1) = (cfg.embed_dim(0), cfg.embed_dim(1));
        let (b, t) = (1, cfg.seq_len());
        let tokens0 = Tensor::from_vec(
            vec![b, t, d0],
            (0..b * t * d0).map(|i| ((i * 11 + 5) % 17) as f32 / 17.0 - 0.5).collect(),
        )
        .unwrap();

        let mut g = Graph::inference();
        let v0 = slice_stage(&mut g, &w, &cfg, 0).unwrap();
        let qkv0 = g
            .linear(&tokens0, &v0.layers[0].qkv_weight, Some(&v0.layers[0].qkv_bias))
            .unwrap();
        let att0 = g.attention(&qkv0, 1, cfg.head_dim).unwrap();

        // Full-width weights with head-1 columns zeroed (head-major: the
        // trailing 3·head_dim columns belong to head 1).
        let full_w = w.layers[0].qkv_weight.to_vec();
        let full_b = w.layers[0].qkv_bias.to_vec();
        let cols = 3 * d1;
        let mut masked_w = full_w.clone();
        let mut masked_b = full_b.clone();
        for r in 0..d1 {
            for c in 3 * d0..cols {
                masked_w[r * cols + c] = 0.0;
            }
        }
        for c in 3 * d0..cols {
            masked_b[c] = 0.0;
        }
        let wt = Tensor::from_vec(vec![d1, cols], masked_w).unwrap();
        let bt_ = Tensor::from_vec(vec![cols], masked_b).unwrap();
        // Zero-pad stage-1 tokens to full width.
        let padded = g.pad_channels(&tokens0, d1, false).unwrap();
        let qkv1 = g.linear(&padded, &wt, Some(&bt_)).unwrap();
        let att1 = g.attention(&qkv1, 2, cfg.head_dim).unwrap();

        let a0 = att0.to_vec();
        let a1 = att1.to_vec();
        for i in 0..t {
            let lhs = &a0[i * d0..(i + 1) * d0];
            let rhs = &a1[i * d1..i * d1 + d0];
            assert_eq!(bits(lhs), bits(rhs), "token {i}");
            // Masked heads contribute exactly zero channels.
            assert!(a1[i * d1 + d0..(i + 1) * d1].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn count_params_matches_published_geometries() {
        let tiny = ModelConfig {
            image_size: 224,
            patch_size: 16,
            num_layers: 12,
            head_dim: 64,
            num_classes: 1000,
            mlp_ratio: 4,
            eps: 1e-6,
            stages: vec![StageSpec { heads: 3, loss_weight: 0.5 }, StageSpec { heads: 6, loss_weight: 0.5 }],
        };
        let p_tiny = count_params(&tiny, 0).unwrap();
        assert_eq!(p_tiny, 5_717_416);
        assert!((p_tiny as f64 / 5.70e6 - 1.0).abs() < 0.01);
        let p_small = count_params(&tiny, 1).unwrap();
        assert_eq!(p_small, 22_050_664);
        assert!((p_small as f64 / 22.1e6 - 1.0).abs() < 0.01);
    }

    #[test]
    fn count_params_matches_hand_enumerated_toy() {
        // d=8, L=1, C=3, P=4, patch 2, image 4:
        //   patch 3·4·8+8 = 104; pos 5·8 = 40; cls 8
        //   ln1 16; qkv 8·24+24 = 216; out 8·8+8 = 72; ln2 16
        //   mlp_in 8·32+32 = 288; mlp_out 32·8+8 = 264
        //   final norm 16; head 8·3+3 = 27
        //   total = 104+40+8+16+216+72+16+288+264+16+27 = 1067
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 2,
            num_layers: 1,
            head_dim: 4,
            num_classes: 3,
            mlp_ratio: 4,
            eps: 1e-6,
            stages: vec![StageSpec { heads: 2, loss_weight: 1.0 }],
        };
        assert_eq!(count_params(&cfg, 0).unwrap(), 1067);
    }

    #[test]
    fn named_inventory_matches_analytic_count() {
        let cfg = toy_config(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        let named = w.named_tensors();
        assert_eq!(named.len(), 8 + 12 * cfg.num_layers);
        let total: u64 = named.iter().map(|(_, t)| t.numel() as u64).sum();
        assert_eq!(total, count_params(&cfg, cfg.num_stages() - 1).unwrap());
    }

    #[test]
    fn unknown_stage_is_a_configuration_error() {
        let cfg = toy_config(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = NestedWeights::init(&cfg, &mut rng).unwrap();
        let mut g = Graph::inference();
        assert!(matches!(
            slice_stage(&mut g, &w, &cfg, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(count_params(&cfg, 5), Err(Error::Config(_))));
    }
}
