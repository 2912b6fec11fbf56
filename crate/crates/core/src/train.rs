//! Joint and sampled multi-stage training.
//!
//! Every step runs the stage chain forward (all stages for joint
//! training, up to the deepest visited stage for sampled strategies),
//! sums the λ-weighted cross-entropies of the visited stages, and
//! applies one optimizer step. Recycled tokens always come from actually
//! executing the earlier stages in the same graph, so shared prefix
//! weights receive gradients from every visited stage.
//!
//! All randomness (batch indices, then the per-step stage draw) flows
//! through one seeded ChaCha stream whose position is checkpointed;
//! resuming therefore reproduces an uninterrupted run exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointData, LoadedCheckpoint, OptimizerMeta};
use crate::config::{RunConfig, TrainStrategy};
use crate::error::{Error, Result};
use crate::fusion::{make_transitions, Transition};
use crate::infer::run_all_stages;
use crate::optim::{lr_at, Optimizer, OptimizerKind};
use crate::tensor::{Graph, Tensor};
use crate::vit::NestedWeights;

/// Stages visited by one training step, ascending.
pub fn sample_stages(
    strategy: TrainStrategy,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match strategy {
        TrainStrategy::Joint => Ok((0..n).collect()),
        TrainStrategy::Sandwich => {
            if n < 3 {
                return Err(Error::Config(
                    "sandwich training needs at least 3 stages".into(),
                ));
            }
            Ok(vec![0, rng.random_range(1..n - 1), n - 1])
        }
        TrainStrategy::Stochastic => {
            if n < 3 {
                return Err(Error::Config(
                    "stochastic training needs at least 3 stages".into(),
                ));
            }
            Ok(vec![rng.random_range(0..n)])
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Per-stage loss; None for stages the step did not execute.
    pub losses: Vec<Option<f32>>,
    pub alphas: Vec<f32>,
    pub visited: Vec<usize>,
}

pub struct StepOutcome {
    pub losses: Vec<Option<f32>>,
    pub visited: Vec<usize>,
    pub lr: f64,
}

pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps_run: u64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: NestedWeights,
    pub transitions: Vec<Transition>,
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    pub total_steps: u64,
}

impl Trainer {
    /// Fresh trainer: weights drawn from the run seed (model first, then
    /// fusion parameters), optimizer slots aligned to the parameter list.
    pub fn new(cfg: RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = NestedWeights::init(&cfg.model, &mut rng)?;
        let transitions =
            make_transitions(&cfg.model, cfg.fusion.strategy, cfg.fusion.alpha_init, &mut rng)?;
        let mut trainer = Trainer {
            model,
            transitions,
            optimizer: Optimizer::new(cfg.train.optimizer, cfg.train.weight_decay, &[]),
            rng,
            step: 0,
            epoch: 0,
            total_steps: 0,
            cfg,
        };
        let params = trainer.named_params();
        trainer.optimizer = Optimizer::new(
            trainer.cfg.train.optimizer,
            trainer.cfg.train.weight_decay,
            &params,
        );
        Ok(trainer)
    }

    /// Model tensors followed by fusion tensors, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.model.named_tensors();
        for t in &self.transitions {
            out.extend(t.named_tensors());
        }
        out
    }

    pub fn alphas(&self) -> Vec<f32> {
        self.transitions.iter().map(|t| t.alpha_value()).collect()
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        self.cfg
            .train
            .steps_per_epoch
            .unwrap_or_else(|| train_len.div_ceil(self.cfg.train.batch_size))
            .max(1)
    }

    /// One optimization step on an explicit batch. Draw order within the
    /// step: the stage sample (sampled strategies only).
    pub fn train_step(&mut self, patches: &Tensor, labels: &[usize]) -> Result<StepOutcome> {
        let n = self.cfg.model.num_stages();
        let visited = sample_stages(self.cfg.train.strategy, n, &mut self.rng)?;
        let deepest = *visited.iter().max().expect("visited set is never empty");
        let weights = self.cfg.model.loss_weights();
        let lr = lr_at(
            self.cfg.train.schedule,
            self.cfg.train.learning_rate,
            self.step,
            self.total_steps,
        );

        let mut g = Graph::training();
        let outs = run_all_stages(
            &mut g,
            patches,
            &self.model,
            &self.cfg.model,
            &self.transitions,
            deepest,
        )?;
        let mut losses = vec![None; n];
        let mut total: Option<Tensor> = None;
        for (s, out) in outs.iter().enumerate() {
            let ce = g.cross_entropy(&out.logits, labels)?;
            let v = ce.to_vec()[0];
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { stage: s, step: self.step });
            }
            losses[s] = Some(v);
            if visited.contains(&s) && weights[s] > 0.0 {
                let weighted = g.scale(&ce, weights[s])?;
                total = Some(match total {
                    None => weighted,
                    Some(t) => g.add(&t, &weighted)?,
                });
            }
        }
        // A sampled step can land exclusively on zero-weight stages; it
        // then contributes nothing and must not touch any parameter.
        if let Some(total) = &total {
            g.backward(total)?;
            let params = self.named_params();
            self.optimizer.step(&params, lr, self.cfg.train.grad_clip)?;
            for (_, p) in &params {
                p.zero_grad();
            }
        }
        self.step += 1;
        Ok(StepOutcome { losses, visited, lr })
    }

    /// Draw a batch (with replacement) and run one step.
    pub fn run_one_step(&mut self, data: &crate::data::DatasetHandle) -> Result<StepOutcome> {
        let train_len = data.train.len();
        let idxs: Vec<usize> = (0..self.cfg.train.batch_size)
            .map(|_| self.rng.random_range(0..train_len))
            .collect();
        let patches = data.train.batch_patches(&idxs, self.cfg.model.patch_size)?;
        let labels = data.train.labels_for(&idxs);
        self.train_step(&patches, &labels)
    }

    /// Full training loop with metrics and periodic checkpoints.
    pub fn run(
        &mut self,
        data: &crate::data::DatasetHandle,
        out_dir: &Path,
    ) -> Result<RunSummary> {
        if data.train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        std::fs::create_dir_all(out_dir)?;
        let spe = self.steps_per_epoch(data.train.len()) as u64;
        self.total_steps = self.cfg.train.epochs as u64 * spe;
        let metrics_path = out_dir.join("metrics.jsonl");
        let mut metrics = std::io::BufWriter::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&metrics_path)?,
        );
        let started_at = self.step;
        while self.step < self.total_steps {
            let outcome = self.run_one_step(data)?;
            self.epoch = self.step / spe;
            if self.step % self.cfg.train.log_every as u64 == 0 || self.step == self.total_steps {
                let record = MetricsRecord {
                    step: self.step,
                    epoch: self.epoch,
                    lr: outcome.lr,
                    losses: outcome.losses,
                    alphas: self.alphas(),
                    visited: outcome.visited,
                };
                serde_json::to_writer(&mut metrics, &record)?;
                metrics.write_all(b"\n")?;
            }
            if let Some(every) = self.cfg.train.checkpoint_every {
                if self.step % every as u64 == 0 && self.step < self.total_steps {
                    metrics.flush()?;
                    self.save_checkpoint(
                        &out_dir.join(format!("checkpoints/step_{:06}", self.step)),
                    )?;
                }
            }
        }
        metrics.flush()?;
        let final_checkpoint = out_dir.join("checkpoint_final");
        self.save_checkpoint(&final_checkpoint)?;
        Ok(RunSummary {
            final_checkpoint,
            metrics_path,
            steps_run: self.step - started_at,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let params = self.named_params();
        let kind = match self.cfg.train.optimizer {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        };
        checkpoint::save(
            dir,
            &CheckpointData {
                config: &self.cfg,
                epoch: self.epoch,
                step: self.step,
                rng_seed: self.cfg.seed,
                rng_word_pos: self.rng.get_word_pos(),
                optimizer: Some(OptimizerMeta {
                    kind: kind.to_string(),
                    slot_steps: self.optimizer.slot_steps(),
                }),
                model_tensors: params.clone(),
                optimizer_tensors: self.optimizer.state_tensors(&params),
            },
        )
    }

    /// Rebuild a trainer from a checkpoint. The config must match the
    /// checkpointed one (out_dir aside); the RNG resumes at its saved
    /// position, so subsequent steps match the uninterrupted run.
    pub fn resume(cfg: RunConfig, ckpt_dir: &Path) -> Result<Trainer> {
        let loaded = checkpoint::load(ckpt_dir)?;
        let saved = &loaded.manifest.config;
        if saved.model != cfg.model
            || saved.train != cfg.train
            || saved.fusion != cfg.fusion
            || saved.data != cfg.data
            || saved.seed != cfg.seed
        {
            return Err(Error::Corrupt(
                "checkpoint was produced by a different configuration".into(),
            ));
        }
        let mut trainer = Trainer::new(cfg)?;
        let params = trainer.named_params();
        if params.len() != loaded.manifest.tensors.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} tensors, model needs {}",
                loaded.manifest.tensors.len(),
                params.len()
            )));
        }
        for (name, p) in &params {
            let (shape, data) = loaded.model_tensor(name)?;
            if shape != p.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    p.shape()
                )));
            }
            p.set_data(data)?;
        }
        if let Some(meta) = loaded.manifest.optimizer.clone() {
            trainer
                .optimizer
                .restore(&meta.slot_steps, |n| loaded.optimizer_tensor(n), &params)?;
        }
        trainer.step = loaded.manifest.step;
        trainer.epoch = loaded.manifest.epoch;
        trainer.rng = ChaCha8Rng::seed_from_u64(loaded.manifest.rng_seed);
        trainer.rng.set_word_pos(loaded.rng_word_pos()?);
        Ok(trainer)
    }
}

/// Rebuild just the model and fusion parameters for evaluation. The
/// provided config's model section must match the checkpoint's ("stage
/// list differs" style mismatches are rejected).
pub fn restore_model(
    run_cfg: &RunConfig,
    loaded: &LoadedCheckpoint,
) -> Result<(NestedWeights, Vec<Transition>)> {
    let saved = &loaded.manifest.config;
    if saved.model != run_cfg.model {
        return Err(Error::Corrupt(format!(
            "checkpoint model does not match the config (stages {:?} vs {:?})",
            saved.model.stages, run_cfg.model.stages
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(saved.seed);
    let model = NestedWeights::init(&saved.model, &mut rng)?;
    let transitions = make_transitions(
        &saved.model,
        saved.fusion.strategy,
        saved.fusion.alpha_init,
        &mut rng,
    )?;
    let mut params = model.named_tensors();
    for t in &transitions {
        params.extend(t.named_tensors());
    }
    for (name, p) in &params {
        let (shape, data) = loaded.model_tensor(name)?;
        if shape != p.shape() {
            return Err(Error::Corrupt(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                p.shape()
            )));
        }
        p.set_data(data)?;
    }
    Ok((model, transitions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;

    fn toy_cfg(heads: &[usize], weights: &[f32]) -> RunConfig {
        let stages: Vec<serde_json::Value> = heads
            .iter()
            .zip(weights)
            .map(|(h, w)| serde_json::json!({"heads": h, "loss_weight": w}))
            .collect();
        let json = serde_json::json!({
            "seed": 11,
            "model": {
                "image_size": 8, "patch_size": 4, "num_layers": 1,
                "head_dim": 4, "num_classes": 3,
                "stages": stages
            },
            "train": {"epochs": 1, "batch_size": 4, "learning_rate": 1e-3},
            "data": {"source": "synthetic", "train_size": 16, "val_size": 8}
        });
        RunConfig::from_json_str(&json.to_string()).unwrap()
    }

    #[test]
    fn sample_stages_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_stages(TrainStrategy::Joint, 3, &mut rng).unwrap(),
            vec![0, 1, 2]
        );
        // Sandwich over 3 stages always visits {0, 1, 2}.
        for _ in 0..50 {
            let v = sample_stages(TrainStrategy::Sandwich, 3, &mut rng).unwrap();
            assert_eq!(v, vec![0, 1, 2]);
        }
        for _ in 0..50 {
            let v = sample_stages(TrainStrategy::Sandwich, 5, &mut rng).unwrap();
            assert_eq!(v.len(), 3);
            assert_eq!(v[0], 0);
            assert_eq!(v[2], 4);
            assert!((1..4).contains(&v[1]));
        }
        for _ in 0..50 {
            let v = sample_stages(TrainStrategy::Stochastic, 4, &mut rng).unwrap();
            assert_eq!(v.len(), 1);
            assert!(v[0] < 4);
        }
        assert!(matches!(
            sample_stages(TrainStrategy::Sandwich, 2, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_stages(TrainStrategy::Stochastic, 2, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dead_branch_receives_exactly_zero_gradient() {
        // λ = [1, 0]: stage 2 runs (the chain needs it during training),
        // but stage-2-exclusive parameters must see zero gradient.
        let cfg = toy_cfg(&[1, 2], &[1.0, 0.0]);
        let trainer = Trainer::new(cfg.clone()).unwrap();
        let data = cfg.load_dataset().unwrap();
        let idxs: Vec<usize> = (0..4).collect();
        let patches = data.train.batch_patches(&idxs, 4).unwrap();
        let labels = data.train.labels_for(&idxs);

        let mut g = Graph::training();
        let outs = run_all_stages(
            &mut g,
            &patches,
            &trainer.model,
            &cfg.model,
            &trainer.transitions,
            1,
        )
        .unwrap();
        // Only the stage-1 loss contributes.
        let loss = g.cross_entropy(&outs[0].logits, &labels).unwrap();
        g.backward(&loss).unwrap();

        // Fusion parameters belong exclusively to stage 2.
        assert!(trainer.transitions[0].alpha.grad().is_none());
        assert!(trainer.transitions[0].proj_weight.as_ref().unwrap().grad().is_none());

        // Full-width qkv rows/cols beyond the stage-1 slice stay zero.
        let d0 = cfg.model.embed_dim(0);
        let qkv = &trainer.model.layers[0].qkv_weight;
        let grad = qkv.grad().unwrap();
        let cols = qkv.shape()[1];
        for (i, gv) in grad.iter().enumerate() {
            let (r, c) = (i / cols, i % cols);
            if r >= d0 || c >= 3 * d0 {
                assert_eq!(*gv, 0.0, "row {r} col {c}");
            }
        }
        // The head weight's rows beyond d0 are stage-2 exclusive too.
        let head_grad = trainer.model.head_weight.grad().unwrap();
        let c = cfg.model.num_classes;
        for r in d0..cfg.model.full_dim() {
            for j in 0..c {
                assert_eq!(head_grad[r * c + j], 0.0);
            }
        }
    }

    #[test]
    fn loss_weight_gradients_are_linear() {
        let cfg = toy_cfg(&[1, 2], &[0.3, 0.7]);
        let data = cfg.load_dataset().unwrap();
        let idxs: Vec<usize> = (0..4).collect();
        let patches = data.train.batch_patches(&idxs, 4).unwrap();
        let labels = data.train.labels_for(&idxs);

        let grads_for = |weights: [f32; 2]| -> Vec<Vec<f32>> {
            let trainer = Trainer::new(cfg.clone()).unwrap();
            let params = trainer.named_params();
            let mut g = Graph::training();
            let outs = run_all_stages(
                &mut g,
                &patches,
                &trainer.model,
                &cfg.model,
                &trainer.transitions,
                1,
            )
            .unwrap();
            let mut total: Option<Tensor> = None;
            for (s, out) in outs.iter().enumerate() {
                if weights[s] == 0.0 {
                    continue;
                }
                let ce = g.cross_entropy(&out.logits, &labels).unwrap();
                let wl = g.scale(&ce, weights[s]).unwrap();
                total = Some(match total {
                    None => wl,
                    Some(t) => g.add(&t, &wl).unwrap(),
                });
            }
            g.backward(&total.unwrap()).unwrap();
            params
                .iter()
                .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect()
        };

        let g1 = grads_for([1.0, 0.0]);
        let g2 = grads_for([0.0, 1.0]);
        let gw = grads_for([0.3, 0.7]);
        let mut max_scale = 0f32;
        for ((a, b), w) in g1.iter().zip(&g2).zip(&gw) {
            for v in w {
                max_scale = max_scale.max(v.abs());
            }
            let _ = (a, b);
        }
        for ((a, b), w) in g1.iter().zip(&g2).zip(&gw) {
            for i in 0..w.len() {
                let expect = 0.3 * a[i] + 0.7 * b[i];
                assert!(
                    (w[i] - expect).abs() <= 1e-5 * max_scale.max(1.0),
                    "{} vs {expect}",
                    w[i]
                );
            }
        }
    }

    #[test]
    fn zero_weight_only_steps_touch_nothing() {
        // Stochastic sampling can land on a zero-weight stage; the step
        // must then leave every parameter byte unchanged.
        let cfg = toy_cfg(&[1, 2, 3], &[0.0, 1.0, 1.0]);
        let mut cfg = cfg;
        cfg.train.strategy = TrainStrategy::Stochastic;
        cfg.validate().unwrap();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let data = cfg.load_dataset().unwrap();
        // Find a step where the draw lands on stage 0 by peeking with a
        // cloned RNG.
        loop {
            let mut peek = trainer.rng.clone();
            // run_one_step draws the batch first, then the stage.
            for _ in 0..cfg.train.batch_size {
                let _ = peek.random_range(0..data.train.len());
            }
            let next = sample_stages(TrainStrategy::Stochastic, 3, &mut peek).unwrap();
            let before: Vec<Vec<u32>> = trainer
                .named_params()
                .iter()
                .map(|(_, p)| p.to_vec().iter().map(|v| v.to_bits()).collect())
                .collect();
            let outcome = trainer.run_one_step(&data).unwrap();
            if next == vec![0] {
                assert_eq!(outcome.visited, vec![0]);
                let after: Vec<Vec<u32>> = trainer
                    .named_params()
                    .iter()
                    .map(|(_, p)| p.to_vec().iter().map(|v| v.to_bits()).collect())
                    .collect();
                assert_eq!(before, after);
                break;
            }
        }
    }

    #[test]
    fn metrics_file_has_a_record_per_step() {
        let cfg = toy_cfg(&[1, 2], &[0.5, 0.5]);
        let mut cfg = cfg;
        cfg.train.steps_per_epoch = Some(5);
        let data = cfg.load_dataset().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();
        let summary = trainer.run(&data, dir.path()).unwrap();
        assert_eq!(summary.steps_run, 5);
        let text = std::fs::read_to_string(&summary.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        let rec: MetricsRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(rec.step, 1);
        assert_eq!(rec.losses.len(), 2);
        assert!(summary.final_checkpoint.join("manifest.json").exists());
    }

    #[test]
    fn resume_requires_matching_config() {
        let cfg = toy_cfg(&[1, 2], &[0.5, 0.5]);
        let mut run_cfg = cfg.clone();
        run_cfg.train.steps_per_epoch = Some(2);
        let data = run_cfg.load_dataset().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(run_cfg.clone()).unwrap();
        let summary = trainer.run(&data, dir.path()).unwrap();

        let mut other = run_cfg.clone();
        other.seed = 999;
        assert!(matches!(
            Trainer::resume(other, &summary.final_checkpoint),
            Err(Error::Corrupt(_))
        ));
        let resumed = Trainer::resume(run_cfg, &summary.final_checkpoint).unwrap();
        assert_eq!(resumed.step, 2);
    }
}
