//! Entropy-gated progressive inference.
//!
//! After stage k the Shannon entropy (natural log, 0·log 0 := 0) of the
//! softmax output decides per sample whether to stop: halt iff H < τ,
//! strictly, so τ = 0 never halts early and τ ≥ ln C always does. The
//! final stage always emits. Batches are regrouped between stages so a
//! wider stage only processes the samples that actually continue; every
//! kernel is row-independent, so regrouped forwards are bit-identical to
//! full-batch ones.
//!
//! Sweeps run every stage once per sample (entropies do not depend on τ)
//! and replay the halting decision for each threshold.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::cost;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{fuse, Transition};
use crate::tensor::{Graph, Tensor};
use crate::vit::{embed_stage, forward_stage, slice_stage, ModelConfig, NestedWeights, StageOutput};

/// Shannon entropy in nats of a probability vector; 0·log 0 is 0.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .fold(0.0, |acc, &p| if p > 0.0 { acc - p * p.ln() } else { acc })
}

/// Entropy of softmax(logits), computed entirely in f64.
pub fn entropy_from_logits(logits: &[f32]) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0f64;
    for &l in logits {
        sum += (l as f64 - max).exp();
    }
    let mut h = 0f64;
    for &l in logits {
        let p = (l as f64 - max).exp() / sum;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Entropy thresholds in nats. One shared value, or one per transition
/// for models with more than two stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltPolicy {
    thresholds: Vec<f64>,
}

impl HaltPolicy {
    pub fn shared(tau: f64) -> Result<HaltPolicy> {
        Self::per_transition(vec![tau])
    }

    pub fn per_transition(taus: Vec<f64>) -> Result<HaltPolicy> {
        if taus.is_empty() {
            return Err(Error::Config("halt policy needs at least one threshold".into()));
        }
        if taus.iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::Config(format!("thresholds must be >= 0, got {taus:?}")));
        }
        Ok(HaltPolicy { thresholds: taus })
    }

    /// Threshold applied after finishing 0-based `stage`.
    pub fn threshold_after(&self, stage: usize) -> f64 {
        if self.thresholds.len() == 1 {
            self.thresholds[0]
        } else {
            self.thresholds[stage.min(self.thresholds.len() - 1)]
        }
    }

    pub fn validate_for(&self, num_stages: usize) -> Result<()> {
        if self.thresholds.len() != 1 && self.thresholds.len() != num_stages - 1 {
            return Err(Error::Config(format!(
                "expected 1 or {} thresholds for {} stages, got {}",
                num_stages - 1,
                num_stages,
                self.thresholds.len()
            )));
        }
        Ok(())
    }
}

/// Strict halting rule.
pub fn halts(entropy: f64, tau: f64) -> bool {
    entropy < tau
}

/// Per-sample record of a forced pass through every stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FullTrace {
    pub id: usize,
    pub label: usize,
    pub hard: bool,
    pub entropies: Vec<f64>,
    pub preds: Vec<usize>,
}

/// Per-sample record of one progressive run; `halted_stage` is 1-based.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HaltedTrace {
    pub id: usize,
    pub entropies: Vec<f64>,
    pub halted_stage: usize,
    pub pred: usize,
    pub label: usize,
}

/// Execute stages 0..=last_stage chained through token fusion, from
/// fresh patch vectors. Returns one StageOutput per executed stage.
pub fn run_all_stages(
    g: &mut Graph,
    patches: &Tensor,
    w: &NestedWeights,
    cfg: &ModelConfig,
    transitions: &[Transition],
    last_stage: usize,
) -> Result<Vec<StageOutput>> {
    if transitions.len() != cfg.num_stages() - 1 {
        return Err(Error::Config(format!(
            "{} transitions for {} stages",
            transitions.len(),
            cfg.num_stages()
        )));
    }
    let mut outs = Vec::with_capacity(last_stage + 1);
    let mut z_prev: Option<Tensor> = None;
    for s in 0..=last_stage {
        let view = slice_stage(g, w, cfg, s)?;
        let fresh = embed_stage(g, patches, &view)?;
        let tokens = match &z_prev {
            None => fresh,
            Some(z) => fuse(g, z, &fresh, &transitions[s - 1])?,
        };
        let out = forward_stage(g, &tokens, &view, cfg)?;
        z_prev = Some(out.tokens.clone());
        outs.push(out);
    }
    Ok(outs)
}

fn batched_ids(n: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Run every stage for every sample once, in dataset order.
pub fn forced_full_pass(
    cfg: &ModelConfig,
    w: &NestedWeights,
    transitions: &[Transition],
    data: &Dataset,
    batch: usize,
) -> Result<Vec<FullTrace>> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let n_stages = cfg.num_stages();
    let c = cfg.num_classes;
    let mut traces = Vec::with_capacity(data.len());
    for ids in batched_ids(data.len(), batch) {
        let patches = data.batch_patches(&ids, cfg.patch_size)?;
        let mut g = Graph::inference();
        let outs = run_all_stages(&mut g, &patches, w, cfg, transitions, n_stages - 1)?;
        for (row, &id) in ids.iter().enumerate() {
            let mut entropies = Vec::with_capacity(n_stages);
            let mut preds = Vec::with_capacity(n_stages);
            for out in &outs {
                entropies.push(out.entropy[row]);
                let ld = out.logits.data();
                preds.push(argmax(&ld[row * c..(row + 1) * c]));
            }
            traces.push(FullTrace {
                id,
                label: data.labels[id],
                hard: data.hard[id],
                entropies,
                preds,
            });
        }
    }
    Ok(traces)
}

/// Gather a row subset of a [B, T, d] tensor (inference-time regrouping).
fn gather_batch_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let per = s[1] * s[2];
    let d = t.data();
    let mut out = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        out.extend_from_slice(&d[r * per..(r + 1) * per]);
    }
    drop(d);
    Tensor::from_vec(vec![rows.len(), s[1], s[2]], out)
}

pub struct ProgressiveOutcome {
    /// One trace per sample, in dataset order.
    pub traces: Vec<HaltedTrace>,
    pub accuracy: f64,
    /// Mean analytic cost per sample over the executed paths.
    pub mean_gmacs: f64,
    /// entry_counts[k] = samples that entered stage k.
    pub stage_entry_counts: Vec<usize>,
    /// Instrumented MAC count actually executed across all forwards.
    pub executed_macs: u64,
}

/// Per-sample entropy-gated inference with batch regrouping: stage k+1
/// only processes the samples whose stage-k entropy was >= τ.
pub fn infer_progressive(
    cfg: &ModelConfig,
    w: &NestedWeights,
    transitions: &[Transition],
    data: &Dataset,
    policy: &HaltPolicy,
    batch: usize,
) -> Result<ProgressiveOutcome> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    policy.validate_for(cfg.num_stages())?;
    let n_stages = cfg.num_stages();
    let c = cfg.num_classes;
    let path_gmacs = cost::path_gmacs_table(cfg, transitions)?;
    let mut traces: Vec<Option<HaltedTrace>> = vec![None; data.len()];
    let mut entry_counts = vec![0usize; n_stages];
    let mut executed_macs = 0u64;

    for ids in batched_ids(data.len(), batch) {
        let mut g = Graph::inference();
        let patches = data.batch_patches(&ids, cfg.patch_size)?;
        // active[i] = (dataset id, entropies so far)
        let mut active: Vec<(usize, Vec<f64>)> =
            ids.iter().map(|&id| (id, Vec::new())).collect();
        let mut cur_patches = patches;
        let mut z_prev: Option<Tensor> = None;

        for s in 0..n_stages {
            entry_counts[s] += active.len();
            let view = slice_stage(&mut g, w, cfg, s)?;
            let fresh = embed_stage(&mut g, &cur_patches, &view)?;
            let tokens = match &z_prev {
                None => fresh,
                Some(z) => fuse(&mut g, z, &fresh, &transitions[s - 1])?,
            };
            let out = forward_stage(&mut g, &tokens, &view, cfg)?;
            let logits = out.logits.data();

            let mut survivors: Vec<usize> = Vec::new();
            for (row, (id, entropies)) in active.iter_mut().enumerate() {
                entropies.push(out.entropy[row]);
                let last = s + 1 == n_stages;
                let stop = last || halts(out.entropy[row], policy.threshold_after(s));
                if stop {
                    traces[*id] = Some(HaltedTrace {
                        id: *id,
                        entropies: entropies.clone(),
                        halted_stage: s + 1,
                        pred: argmax(&logits[row * c..(row + 1) * c]),
                        label: data.labels[*id],
                    });
                } else {
                    survivors.push(row);
                }
            }
            drop(logits);
            if survivors.is_empty() {
                break;
            }
            active = survivors.iter().map(|&r| active[r].clone()).collect();
            cur_patches = {
                let s_p = cur_patches.shape();
                let per = s_p[1] * s_p[2];
                let d = cur_patches.data();
                let mut outp = Vec::with_capacity(survivors.len() * per);
                for &r in &survivors {
                    outp.extend_from_slice(&d[r * per..(r + 1) * per]);
                }
                drop(d);
                Tensor::from_vec(vec![survivors.len(), s_p[1], s_p[2]], outp)?
            };
            z_prev = Some(gather_batch_rows(&out.tokens, &survivors)?);
        }
        executed_macs += g.macs();
    }

    let traces: Vec<HaltedTrace> = traces.into_iter().map(|t| t.unwrap()).collect();
    let correct = traces.iter().filter(|t| t.pred == t.label).count();
    let total_gmacs: f64 = traces.iter().map(|t| path_gmacs[t.halted_stage - 1]).sum();
    Ok(ProgressiveOutcome {
        accuracy: correct as f64 / traces.len() as f64,
        mean_gmacs: total_gmacs / traces.len() as f64,
        stage_entry_counts: entry_counts,
        executed_macs,
        traces,
    })
}

// ── Sweeps and reports ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoutingRow {
    pub tau: f64,
    pub accuracy: f64,
    pub mean_gmacs: f64,
    /// Fraction of samples entering each stage; index 0 is always 1.
    pub stage_entry_ratio: Vec<f64>,
    /// Fraction of samples halting at each stage (sums to 1).
    pub halted_share: Vec<f64>,
    /// Accuracy among samples that halted at each stage.
    pub halted_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingReport {
    pub taus: Vec<f64>,
    pub rows: Vec<RoutingRow>,
    /// Cumulative analytic cost of halting after stage k (1-based k).
    pub path_gmacs: Vec<f64>,
    pub params_m: f64,
    pub num_samples: usize,
    /// Forced-full per-sample traces the rows were replayed from.
    pub traces: Vec<FullTrace>,
}

/// Stage at which a trace halts under shared threshold τ (1-based).
pub fn replay_halt_stage(trace: &FullTrace, tau: f64) -> usize {
    let n = trace.entropies.len();
    for k in 0..n - 1 {
        if halts(trace.entropies[k], tau) {
            return k + 1;
        }
    }
    n
}

fn replay_row(traces: &[FullTrace], tau: f64, path_gmacs: &[f64], n_stages: usize) -> RoutingRow {
    let n = traces.len();
    let mut halted = vec![0usize; n_stages];
    let mut halted_correct = vec![0usize; n_stages];
    let mut entered = vec![0usize; n_stages];
    let mut correct = 0usize;
    let mut total_gmacs = 0f64;
    for t in traces {
        let k = replay_halt_stage(t, tau);
        for e in entered.iter_mut().take(k) {
            *e += 1;
        }
        halted[k - 1] += 1;
        let ok = t.preds[k - 1] == t.label;
        if ok {
            correct += 1;
            halted_correct[k - 1] += 1;
        }
        total_gmacs += path_gmacs[k - 1];
    }
    RoutingRow {
        tau,
        accuracy: correct as f64 / n as f64,
        mean_gmacs: total_gmacs / n as f64,
        stage_entry_ratio: entered.iter().map(|&e| e as f64 / n as f64).collect(),
        halted_share: halted.iter().map(|&h| h as f64 / n as f64).collect(),
        halted_accuracy: halted
            .iter()
            .zip(&halted_correct)
            .map(|(&h, &c)| if h > 0 { Some(c as f64 / h as f64) } else { None })
            .collect(),
    }
}

/// One forced pass over the dataset, then a halting replay per τ.
pub fn sweep(
    cfg: &ModelConfig,
    w: &NestedWeights,
    transitions: &[Transition],
    data: &Dataset,
    taus: &[f64],
    batch: usize,
) -> Result<RoutingReport> {
    if taus.is_empty() {
        return Err(Error::Input("tau list must not be empty".into()));
    }
    if taus.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("tau list must be sorted ascending".into()));
    }
    if taus.iter().any(|t| *t < 0.0 || t.is_nan()) {
        return Err(Error::Input("thresholds must be >= 0".into()));
    }
    let traces = forced_full_pass(cfg, w, transitions, data, batch)?;
    let path_gmacs = cost::path_gmacs_table(cfg, transitions)?;
    let n_stages = cfg.num_stages();
    let rows = taus
        .iter()
        .map(|&tau| replay_row(&traces, tau, &path_gmacs, n_stages))
        .collect();
    Ok(RoutingReport {
        taus: taus.to_vec(),
        rows,
        path_gmacs,
        params_m: cost::total_params_with_transitions(cfg, transitions)? as f64 / 1e6,
        num_samples: traces.len(),
        traces,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoadDistribution {
    pub tau: f64,
    /// Usage share per stage; sums to 1 over the dataset.
    pub shares: Vec<f64>,
    /// Accuracy among the samples that halted at each stage.
    pub accuracy: Vec<Option<f64>>,
}

/// Usage shares and per-stage halted accuracy at one swept τ.
pub fn load_distribution(report: &RoutingReport, tau: f64) -> Result<LoadDistribution> {
    let row = report
        .rows
        .iter()
        .find(|r| r.tau == tau)
        .ok_or_else(|| Error::Lookup(format!("tau {tau} not present in the report")))?;
    Ok(LoadDistribution {
        tau,
        shares: row.halted_share.clone(),
        accuracy: row.halted_accuracy.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DynamicsBuckets {
    /// 1-based earlier round in the pair (k vs k+1).
    pub from_stage: usize,
    pub correct_correct: usize,
    pub correct_wrong: usize,
    pub wrong_correct: usize,
    pub wrong_wrong: usize,
}

impl DynamicsBuckets {
    pub fn total(&self) -> usize {
        self.correct_correct + self.correct_wrong + self.wrong_correct + self.wrong_wrong
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DynamicsReport {
    pub num_samples: usize,
    pub pairs: Vec<DynamicsBuckets>,
}

/// Correctness transitions between consecutive forced rounds.
pub fn prediction_dynamics(traces: &[FullTrace]) -> Result<DynamicsReport> {
    let n_stages = traces
        .first()
        .map(|t| t.preds.len())
        .ok_or_else(|| Error::Input("empty trace set".into()))?;
    if n_stages < 2 {
        return Err(Error::Usage("prediction dynamics needs two or more stages".into()));
    }
    let mut pairs: Vec<DynamicsBuckets> = (0..n_stages - 1)
        .map(|k| DynamicsBuckets {
            from_stage: k + 1,
            correct_correct: 0,
            correct_wrong: 0,
            wrong_correct: 0,
            wrong_wrong: 0,
        })
        .collect();
    for t in traces {
        for k in 0..n_stages - 1 {
            let a = t.preds[k] == t.label;
            let b = t.preds[k + 1] == t.label;
            let bucket = &mut pairs[k];
            match (a, b) {
                (true, true) => bucket.correct_correct += 1,
                (true, false) => bucket.correct_wrong += 1,
                (false, true) => bucket.wrong_correct += 1,
                (false, false) => bucket.wrong_wrong += 1,
            }
        }
    }
    Ok(DynamicsReport { num_samples: traces.len(), pairs })
}

/// Per-stage accuracy under forced full inference.
pub fn stage_accuracies(traces: &[FullTrace]) -> Vec<f64> {
    if traces.is_empty() {
        return Vec::new();
    }
    let n_stages = traces[0].preds.len();
    (0..n_stages)
        .map(|k| {
            traces.iter().filter(|t| t.preds[k] == t.label).count() as f64 / traces.len() as f64
        })
        .collect()
}

// ── File formats ────────────────────────────────────────────────────

/// CSV mirror of the per-τ table.
pub fn sweep_csv(report: &RoutingReport) -> String {
    let n_stages = report.path_gmacs.len();
    let mut out = String::from("tau,accuracy,mean_gmacs");
    for k in 1..=n_stages {
        out.push_str(&format!(",stage_call_ratio_{k}"));
    }
    out.push_str(",params_m\n");
    for row in &report.rows {
        out.push_str(&format!("{},{:.6},{:.6}", row.tau, row.accuracy, row.mean_gmacs));
        for r in &row.stage_entry_ratio {
            out.push_str(&format!(",{r:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", report.params_m));
    }
    out
}

/// JSON twin of the CSV (rows only; traces are written separately).
pub fn sweep_json(report: &RoutingReport) -> serde_json::Value {
    serde_json::json!({
        "taus": report.taus,
        "rows": report.rows,
        "path_gmacs": report.path_gmacs,
        "params_m": report.params_m,
        "num_samples": report.num_samples,
    })
}

pub fn write_full_traces(path: &Path, traces: &[FullTrace]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_halted_traces(path: &Path, traces: &[HaltedTrace]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Read a forced-full trace file; malformed lines report their 1-based
/// line number.
pub fn read_full_traces(path: &Path) -> Result<Vec<FullTrace>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: FullTrace = serde_json::from_str(&line).map_err(|e| {
            Error::Input(format!("trace line {}: {e}", i + 1))
        })?;
        out.push(t);
    }
    Ok(out)
}

/// Machine-readable eval summary; an infinite τ is encoded as "inf".
pub fn eval_json(tau: f64, outcome: &ProgressiveOutcome) -> serde_json::Value {
    let tau_v = if tau.is_finite() {
        serde_json::json!(tau)
    } else {
        serde_json::json!("inf")
    };
    let n = outcome.traces.len() as f64;
    serde_json::json!({
        "tau": tau_v,
        "accuracy": outcome.accuracy,
        "mean_gmacs": outcome.mean_gmacs,
        "stage_entry_ratio": outcome
            .stage_entry_counts
            .iter()
            .map(|&c| c as f64 / n)
            .collect::<Vec<_>>(),
        "num_samples": outcome.traces.len(),
    })
}

/// Summary payload for offline trace post-processing.
pub fn report_json(
    dist: &LoadDistribution,
    dynamics: &DynamicsReport,
    cfg: Option<&RunConfig>,
) -> serde_json::Value {
    serde_json::json!({
        "load_distribution": dist,
        "prediction_dynamics": dynamics,
        "config_echo": cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_one_hot_is_zero() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        let logits = [1000.0f32, 0.0, 0.0];
        assert!(entropy_from_logits(&logits) < 1e-9);
    }

    #[test]
    fn entropy_of_uniform_is_log_c() {
        let probs = vec![1.0 / 1000.0; 1000];
        assert!((entropy(&probs) - 1000f64.ln()).abs() < 1e-6);
        let logits = vec![0.25f32; 1000];
        assert!((entropy_from_logits(&logits) - 1000f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn entropy_matches_direct_sum_and_halting_is_strict() {
        let p = [0.7, 0.2, 0.1];
        let direct: f64 = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        let h = entropy(&p);
        assert!((h - direct).abs() < 1e-9);
        assert!((h - 0.801819).abs() < 1e-5);
        assert!(!halts(h, 0.80)); // continue
        assert!(halts(h, 0.81)); // halt
        assert!(!halts(0.0, 0.0)); // tau = 0 never halts
    }

    #[test]
    fn halt_policy_validation() {
        assert!(HaltPolicy::shared(-0.1).is_err());
        assert!(HaltPolicy::shared(f64::NAN).is_err());
        let p = HaltPolicy::shared(f64::INFINITY).unwrap();
        assert_eq!(p.threshold_after(0), f64::INFINITY);
        let p = HaltPolicy::per_transition(vec![0.5, 0.7]).unwrap();
        assert!(p.validate_for(3).is_ok());
        assert!(p.validate_for(4).is_err());
        assert_eq!(p.threshold_after(0), 0.5);
        assert_eq!(p.threshold_after(1), 0.7);
    }

    fn mk_trace(id: usize, label: usize, entropies: Vec<f64>, preds: Vec<usize>) -> FullTrace {
        FullTrace { id, label, hard: false, entropies, preds }
    }

    #[test]
    fn replay_halt_stage_applies_strict_rule() {
        let t = mk_trace(0, 1, vec![0.5, 0.2], vec![0, 1]);
        assert_eq!(replay_halt_stage(&t, 0.0), 2);
        assert_eq!(replay_halt_stage(&t, 0.5), 2); // strict: 0.5 < 0.5 fails
        assert_eq!(replay_halt_stage(&t, 0.51), 1);
    }

    #[test]
    fn dynamics_buckets_partition_population() {
        let traces = vec![
            mk_trace(0, 1, vec![1.0, 0.5], vec![1, 1]),
            mk_trace(1, 2, vec![1.0, 0.5], vec![2, 0]),
            mk_trace(2, 0, vec![1.0, 0.5], vec![1, 0]),
            mk_trace(3, 3, vec![1.0, 0.5], vec![0, 1]),
        ];
        let d = prediction_dynamics(&traces).unwrap();
        assert_eq!(d.pairs.len(), 1);
        let b = &d.pairs[0];
        assert_eq!(b.correct_correct, 1);
        assert_eq!(b.correct_wrong, 1);
        assert_eq!(b.wrong_correct, 1);
        assert_eq!(b.wrong_wrong, 1);
        assert_eq!(b.total(), 4);
    }

    #[test]
    fn dynamics_needs_two_stages() {
        let traces = vec![mk_trace(0, 0, vec![0.1], vec![0])];
        assert!(matches!(prediction_dynamics(&traces), Err(Error::Usage(_))));
    }

    #[test]
    fn load_distribution_requires_swept_tau() {
        let report = RoutingReport {
            taus: vec![0.0],
            rows: vec![RoutingRow {
                tau: 0.0,
                accuracy: 1.0,
                mean_gmacs: 1.0,
                stage_entry_ratio: vec![1.0, 1.0],
                halted_share: vec![0.0, 1.0],
                halted_accuracy: vec![None, Some(1.0)],
            }],
            path_gmacs: vec![1.0, 2.0],
            params_m: 1.0,
            num_samples: 4,
            traces: vec![],
        };
        let d = load_distribution(&report, 0.0).unwrap();
        assert_eq!(d.shares, vec![0.0, 1.0]);
        assert!(matches!(load_distribution(&report, 0.1), Err(Error::Lookup(_))));
    }

    #[test]
    fn trace_files_round_trip_and_flag_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let traces = vec![
            mk_trace(0, 1, vec![0.9, 0.1], vec![0, 1]),
            mk_trace(1, 0, vec![0.3, 0.2], vec![0, 0]),
        ];
        write_full_traces(&path, &traces).unwrap();
        let back = read_full_traces(&path).unwrap();
        assert_eq!(back, traces);

        std::fs::write(&path, "{\"id\":0}\nnot json\n").unwrap();
        match read_full_traces(&path) {
            Err(Error::Input(msg)) => assert!(msg.contains("line 1"), "{msg}"),
            other => panic!("expected input error, got {other:?}"),
        }
    }
}
