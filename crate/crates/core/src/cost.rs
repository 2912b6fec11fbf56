//! Analytic multiply-accumulate and parameter accounting.
//!
//! Convention: MACs count dense multiplications only — patch projection,
//! QKV, attention scores and value aggregation, attention output
//! projection, MLP, classifier, and the fusion projection. Normalization,
//! softmax and activations are excluded. The graph instruments exactly
//! the same set, so analytic and instrumented counts agree to the MAC.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, Transition};
use crate::infer::{replay_halt_stage, RoutingReport};
use crate::vit::{count_params, ModelConfig};

pub const MACS_CONVENTION: &str =
    "MACs count dense multiplications only; normalization, softmax, and activations are excluded";

/// Closed-form MACs of one standalone stage forward (per sample).
pub fn stage_macs(cfg: &ModelConfig, stage: usize) -> Result<u64> {
    if stage >= cfg.num_stages() {
        return Err(Error::Config(format!("unknown stage {stage}")));
    }
    let d = cfg.embed_dim(stage) as u64;
    let p = cfg.num_patches() as u64;
    let t = cfg.seq_len() as u64;
    let pin = cfg.patch_input_dim() as u64;
    let c = cfg.num_classes as u64;
    let m = cfg.mlp_ratio as u64;
    let l = cfg.num_layers as u64;
    let patch = p * pin * d;
    let per_layer = 3 * t * d * d      // qkv
        + 2 * t * t * d                 // attention scores + value aggregation
        + t * d * d                     // attention output projection
        + 2 * t * d * (m * d); // mlp in + out
    let head = d * c;
    Ok(patch + l * per_layer + head)
}

pub fn stage_gmacs(cfg: &ModelConfig, stage: usize) -> Result<f64> {
    Ok(stage_macs(cfg, stage)? as f64 / 1e9)
}

/// MACs of the fusion alignment feeding `to_stage` (per sample). Only the
/// linear strategy performs dense multiplications.
pub fn transition_macs(cfg: &ModelConfig, t: &Transition) -> u64 {
    match t.strategy {
        FusionStrategy::Linear => {
            let di = cfg.embed_dim(t.from_stage) as u64;
            let dj = cfg.embed_dim(t.to_stage) as u64;
            cfg.seq_len() as u64 * di * dj
        }
        _ => 0,
    }
}

/// Total MACs of executing the first `stages_executed` stages including
/// the fusion projections between them.
pub fn path_macs(
    cfg: &ModelConfig,
    transitions: &[Transition],
    stages_executed: usize,
) -> Result<u64> {
    if stages_executed == 0 || stages_executed > cfg.num_stages() {
        return Err(Error::Config(format!(
            "path must execute 1..={} stages, got {stages_executed}",
            cfg.num_stages()
        )));
    }
    if transitions.len() != cfg.num_stages() - 1 {
        return Err(Error::Config(format!(
            "{} transitions for {} stages",
            transitions.len(),
            cfg.num_stages()
        )));
    }
    let mut total = 0u64;
    for s in 0..stages_executed {
        total += stage_macs(cfg, s)?;
        if s > 0 {
            total += transition_macs(cfg, &transitions[s - 1]);
        }
    }
    Ok(total)
}

pub fn path_gmacs(
    cfg: &ModelConfig,
    transitions: &[Transition],
    stages_executed: usize,
) -> Result<f64> {
    Ok(path_macs(cfg, transitions, stages_executed)? as f64 / 1e9)
}

/// Cumulative path cost for halting after stage k, k = 1..=n.
pub fn path_gmacs_table(cfg: &ModelConfig, transitions: &[Transition]) -> Result<Vec<f64>> {
    (1..=cfg.num_stages())
        .map(|k| path_gmacs(cfg, transitions, k))
        .collect()
}

pub fn transition_params(t: &Transition) -> u64 {
    let mut total = t.alpha.numel() as u64;
    if let Some(w) = &t.proj_weight {
        total += w.numel() as u64;
    }
    if let Some(b) = &t.proj_bias {
        total += b.numel() as u64;
    }
    total
}

/// Full-model parameters plus all fusion parameters.
pub fn total_params_with_transitions(
    cfg: &ModelConfig,
    transitions: &[Transition],
) -> Result<u64> {
    let mut total = count_params(cfg, cfg.num_stages() - 1)?;
    for t in transitions {
        total += transition_params(t);
    }
    Ok(total)
}

/// Mean per-sample cost of the halting decisions a report's traces make
/// at τ: Σ executed-path cost / N. τ must be one of the swept values.
pub fn expected_gmacs(report: &RoutingReport, tau: f64) -> Result<f64> {
    if !report.taus.iter().any(|&t| t == tau) {
        return Err(Error::Lookup(format!("tau {tau} not present in the report")));
    }
    if report.traces.is_empty() {
        return Err(Error::Input("report carries no traces".into()));
    }
    let mut total = 0f64;
    for t in &report.traces {
        let k = replay_halt_stage(t, tau);
        total += report.path_gmacs[k - 1];
    }
    Ok(total / report.traces.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCost {
    pub stage: usize, // 1-based
    pub heads: usize,
    pub embed_dim: usize,
    pub params: u64,
    pub gmacs_stage: f64,
    /// Stage cost plus its inbound fusion projection.
    pub gmacs_incremental: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub convention: String,
    pub stages: Vec<StageCost>,
    /// Cumulative cost of halting after stage k.
    pub path_gmacs: Vec<f64>,
    pub total_params: u64,
    pub params_m: f64,
}

pub fn cost_report(cfg: &ModelConfig, transitions: &[Transition]) -> Result<CostReport> {
    let mut stages = Vec::with_capacity(cfg.num_stages());
    for s in 0..cfg.num_stages() {
        let standalone = stage_gmacs(cfg, s)?;
        let inbound = if s > 0 {
            transition_macs(cfg, &transitions[s - 1]) as f64 / 1e9
        } else {
            0.0
        };
        stages.push(StageCost {
            stage: s + 1,
            heads: cfg.stages[s].heads,
            embed_dim: cfg.embed_dim(s),
            params: count_params(cfg, s)?,
            gmacs_stage: standalone,
            gmacs_incremental: standalone + inbound,
        });
    }
    let total_params = total_params_with_transitions(cfg, transitions)?;
    Ok(CostReport {
        convention: MACS_CONVENTION.to_string(),
        stages,
        path_gmacs: path_gmacs_table(cfg, transitions)?,
        total_params,
        params_m: total_params as f64 / 1e6,
    })
}

pub fn cost_csv(r: &CostReport) -> String {
    let mut out = format!("# {}\n", r.convention);
    out.push_str("stage,heads,embed_dim,params,gmacs_stage,gmacs_incremental,path_gmacs\n");
    for s in &r.stages {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            s.stage,
            s.heads,
            s.embed_dim,
            s.params,
            s.gmacs_stage,
            s.gmacs_incremental,
            r.path_gmacs[s.stage - 1],
        ));
    }
    out
}

/// Table for terminal output; GMACs shown to two decimals.
pub fn cost_text(r: &CostReport) -> String {
    let mut out = format!("# {}\n", r.convention);
    out.push_str("stage  heads  embed  params      gmacs  incremental  path\n");
    for s in &r.stages {
        out.push_str(&format!(
            "{:<6} {:<6} {:<6} {:<11} {:<6.2} {:<12.2} {:.2}\n",
            s.stage,
            s.heads,
            s.embed_dim,
            s.params,
            s.gmacs_stage,
            s.gmacs_incremental,
            r.path_gmacs[s.stage - 1],
        ));
    }
    out.push_str(&format!(
        "total params (with fusion): {} ({:.2}M)\n",
        r.total_params, r.params_m
    ));
    out
}
