// Optimization loop: batched training with Adam, linear warmup into a
// constant rate, global-norm gradient clipping, periodic held-out
// evaluation, and a learning-rate x seed sweep.
//
// Batches are split into a fixed number of contiguous shards; each shard
// accumulates gradients over its sequences and the shard results are
// reduced in shard order. The shard count is part of the configuration, not
// of the executor, so serial and parallel runners produce bit-identical
// results.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::linalg;
use crate::math;
use crate::model::{forward_batch_on_tape, init_params, ModelConfig, ParamVars};
use crate::rng::{derive_seed, Rng};
use crate::tasks::{evaluate, TaskSample, TaskSpec};
use crate::tensor::Tape;

// Seed-stream tags.
const TAG_INIT: u64 = 0x5EED_0001;
const TAG_BATCH: u64 = 0x5EED_0002;
const TAG_EVAL: u64 = 0x5EED_0003;
const TAG_FINAL_EVAL: u64 = 0x5EED_0004;

/// Seed used for the final held-out evaluation of a run; exposed so a
/// later standalone evaluation can reproduce the run's numbers exactly.
pub fn final_eval_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, TAG_FINAL_EVAL)
}

// ── Configuration and records ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_list: Vec<f64>,
    pub seeds_per_lr: usize,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub final_eval_samples: usize,
    /// Contiguous shards per batch; fixes the gradient reduction order.
    pub shard_count: usize,
    /// Stop a run once its held-out normalized accuracy reaches this.
    pub early_stop_norm_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            steps: 5000,
            lr_list: vec![5e-3, 1e-3, 5e-4, 1e-4],
            seeds_per_lr: 3,
            warmup_steps: 100,
            grad_clip: 1.0,
            eval_interval: 250,
            eval_samples: 512,
            final_eval_samples: 2000,
            shard_count: 16,
            early_stop_norm_acc: None,
        }
    }
}

/// One held-out evaluation during a run.
#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub raw_acc: f64,
    pub norm_acc: f64,
}

/// Everything recorded about one training run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub lr: f64,
    pub seed: u64,
    pub eval_points: Vec<EvalPoint>,
    pub steps_run: usize,
    pub final_raw_acc: f64,
    pub final_norm_acc: f64,
    /// Best normalized accuracy over all eval points.
    pub best_norm_acc: f64,
    pub diverged: bool,
    pub early_stopped: bool,
    /// Wall-clock seconds as measured by the caller's clock.
    pub wall_secs: f64,
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam with bias correction; no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - math::powf(self.beta1, self.t as f64);
        let b2t = 1.0 - math::powf(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (math::sqrt(vhat) + self.eps);
        }
    }
}

/// Scale gradients so the global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = linalg::norm2(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

// ── Batch execution ──────────────────────────────────────────────────

/// Gradients and loss accounting for one shard of a batch.
pub struct ShardOut {
    pub grads: Vec<f64>,
    pub loss_sum: f64,
    pub masked_count: usize,
}

/// Forward/backward over one shard's sequences on a single tape (the dense
/// blocks batch across the shard). Loss is the cross-entropy *sum* so
/// shards pool exactly.
pub fn run_shard(cfg: &ModelConfig, flat: &[f64], samples: &[TaskSample]) -> Result<ShardOut> {
    let params = ParamVars::from_flat(cfg, flat, true);
    if samples.is_empty() {
        return Ok(ShardOut {
            grads: vec![0.0; flat.len()],
            loss_sum: 0.0,
            masked_count: 0,
        });
    }
    let sequences: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let labels: Vec<usize> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let mask: Vec<bool> = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let mut tape = Tape::new();
    let logits = forward_batch_on_tape(&mut tape, cfg, &params, &sequences)?;
    let loss = tape.cross_entropy(&logits, &labels, &mask, false)?;
    let loss_sum = loss.borrow().data[0];
    let masked_count = mask.iter().filter(|&&m| m).count();
    tape.backward(&loss)?;
    Ok(ShardOut { grads: params.grads_flat(cfg), loss_sum, masked_count })
}

/// Executes the shards of one batch. Implementations may run shards in
/// parallel but must return them in order.
pub trait BatchRunner {
    fn run(&self, cfg: &ModelConfig, flat: &[f64], shards: &[Vec<TaskSample>])
        -> Result<Vec<ShardOut>>;
}

/// Single-threaded reference runner.
pub struct SerialRunner;

impl BatchRunner for SerialRunner {
    fn run(
        &self,
        cfg: &ModelConfig,
        flat: &[f64],
        shards: &[Vec<TaskSample>],
    ) -> Result<Vec<ShardOut>> {
        shards.iter().map(|s| run_shard(cfg, flat, s)).collect()
    }
}

/// Split a batch into `shard_count` contiguous shards (the last ones may be
/// one element shorter).
pub fn make_shards(batch: Vec<TaskSample>, shard_count: usize) -> Vec<Vec<TaskSample>> {
    let n = batch.len();
    let count = shard_count.max(1).min(n.max(1));
    let base = n / count;
    let extra = n % count;
    let mut shards = Vec::with_capacity(count);
    let mut iter = batch.into_iter();
    for i in 0..count {
        let len = base + usize::from(i < extra);
        shards.push(iter.by_ref().take(len).collect());
    }
    shards
}

// ── Training loop ────────────────────────────────────────────────────

/// Train one model with a fixed learning rate and seed; returns the record
/// and the final parameters.
pub fn train(
    cfg: &ModelConfig,
    task: &TaskSpec,
    tc: &TrainConfig,
    lr: f64,
    seed: u64,
    runner: &dyn BatchRunner,
    clock: &dyn Fn() -> f64,
) -> Result<(RunRecord, Vec<f64>)> {
    train_observed(cfg, task, tc, lr, seed, runner, clock, None)
}

/// [`train`] with a per-eval-point observer (used to stream metrics).
#[allow(clippy::too_many_arguments)]
pub fn train_observed(
    cfg: &ModelConfig,
    task: &TaskSpec,
    tc: &TrainConfig,
    lr: f64,
    seed: u64,
    runner: &dyn BatchRunner,
    clock: &dyn Fn() -> f64,
    mut on_eval: Option<&mut dyn FnMut(&EvalPoint)>,
) -> Result<(RunRecord, Vec<f64>)> {
    cfg.validate()?;
    let t0 = clock();
    let mut flat = init_params(cfg, derive_seed(seed, TAG_INIT));
    let mut adam = Adam::new(flat.len());
    let mut batch_rng = Rng::new(derive_seed(seed, TAG_BATCH));

    let mut record = RunRecord {
        lr,
        seed,
        eval_points: Vec::new(),
        steps_run: 0,
        final_raw_acc: 0.0,
        final_norm_acc: 0.0,
        best_norm_acc: f64::NEG_INFINITY,
        diverged: false,
        early_stopped: false,
        wall_secs: 0.0,
    };

    if tc.steps == 0 {
        let (raw, norm) = evaluate(cfg, &flat, task, tc.final_eval_samples, true, final_eval_seed(seed))?;
        let point = EvalPoint { step: 0, train_loss: f64::NAN, raw_acc: raw, norm_acc: norm };
        if let Some(cb) = on_eval.as_mut() {
            cb(&point);
        }
        record.eval_points.push(point);
        record.final_raw_acc = raw;
        record.final_norm_acc = norm;
        record.best_norm_acc = norm;
        record.wall_secs = clock() - t0;
        return Ok((record, flat));
    }

    let mut last_loss = f64::NAN;
    for step in 0..tc.steps {
        let batch: Vec<TaskSample> =
            (0..tc.batch_size).map(|_| task.sample_train(&mut batch_rng)).collect();
        let shards = make_shards(batch, tc.shard_count);
        let outs = runner.run(cfg, &flat, &shards)?;

        let mut grads = vec![0.0; flat.len()];
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for out in outs {
            linalg::axpy(1.0, &out.grads, &mut grads);
            loss_sum += out.loss_sum;
            count += out.masked_count;
        }
        let inv = 1.0 / count as f64;
        for g in grads.iter_mut() {
            *g *= inv;
        }
        last_loss = loss_sum * inv;
        record.steps_run = step + 1;

        if !last_loss.is_finite() {
            record.diverged = true;
            break;
        }

        clip_global_norm(&mut grads, tc.grad_clip);
        let warm = if tc.warmup_steps > 0 {
            ((step + 1) as f64 / tc.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        adam.step(&mut flat, &grads, lr * warm);

        let at_interval = tc.eval_interval > 0 && (step + 1) % tc.eval_interval == 0;
        if at_interval && step + 1 < tc.steps {
            let eval_seed = derive_seed(seed, TAG_EVAL ^ ((step + 1) as u64));
            let (raw, norm) = evaluate(cfg, &flat, task, tc.eval_samples, true, eval_seed)?;
            let point = EvalPoint {
                step: step + 1,
                train_loss: last_loss,
                raw_acc: raw,
                norm_acc: norm,
            };
            if let Some(cb) = on_eval.as_mut() {
                cb(&point);
            }
            record.eval_points.push(point);
            record.best_norm_acc = record.best_norm_acc.max(norm);
            if let Some(thr) = tc.early_stop_norm_acc {
                if norm >= thr {
                    record.early_stopped = true;
                    break;
                }
            }
        }
    }

    // Final held-out evaluation on the larger sample budget.
    let (raw, norm) = evaluate(cfg, &flat, task, tc.final_eval_samples, true, final_eval_seed(seed))?;
    let point = EvalPoint {
        step: record.steps_run,
        train_loss: last_loss,
        raw_acc: raw,
        norm_acc: norm,
    };
    if let Some(cb) = on_eval.as_mut() {
        cb(&point);
    }
    record.eval_points.push(point);
    record.final_raw_acc = raw;
    record.final_norm_acc = norm;
    record.best_norm_acc = record.best_norm_acc.max(norm);
    record.wall_secs = clock() - t0;
    Ok((record, flat))
}

// ── Learning-rate sweep ──────────────────────────────────────────────

/// Grid results: all run records, the best run (by final normalized
/// accuracy), its parameters, and the median/MAD over seeds at the best
/// learning rate.
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub best_index: usize,
    pub best_params: Vec<f64>,
    pub median_norm_acc: f64,
    pub mad_norm_acc: f64,
    /// True when a stop threshold ended the grid early.
    pub stopped_early: bool,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Run the full lr x seed grid (optionally stopping once a run clears
/// `stop_threshold`), selecting the best run by final normalized accuracy.
/// Per-run divergence is recorded, not propagated.
#[allow(clippy::too_many_arguments)]
pub fn lr_sweep(
    cfg: &ModelConfig,
    task: &TaskSpec,
    tc: &TrainConfig,
    base_seed: u64,
    runner: &dyn BatchRunner,
    clock: &dyn Fn() -> f64,
    stop_threshold: Option<f64>,
    mut on_run: Option<&mut dyn FnMut(&RunRecord)>,
) -> Result<SweepOutcome> {
    let mut records: Vec<RunRecord> = Vec::new();
    let mut best_index = 0usize;
    let mut best_params: Vec<f64> = Vec::new();
    let mut stopped_early = false;

    'grid: for &lr in &tc.lr_list {
        for s in 0..tc.seeds_per_lr {
            let seed = base_seed + s as u64;
            let (rec, params) = train(cfg, task, tc, lr, seed, runner, clock)?;
            if let Some(cb) = on_run.as_mut() {
                cb(&rec);
            }
            let better = records.is_empty()
                || rec.final_norm_acc > records[best_index].final_norm_acc;
            records.push(rec);
            if better {
                best_index = records.len() - 1;
                best_params = params;
            }
            if let Some(thr) = stop_threshold {
                if records[best_index].final_norm_acc >= thr {
                    stopped_early = true;
                    break 'grid;
                }
            }
        }
    }

    let best_lr = records[best_index].lr;
    let mut at_best: Vec<f64> = records
        .iter()
        .filter(|r| r.lr == best_lr)
        .map(|r| r.final_norm_acc)
        .collect();
    let med = median(&mut at_best);
    let mut devs: Vec<f64> = at_best.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&mut devs);

    Ok(SweepOutcome { records, best_index, best_params, median_norm_acc: med, mad_norm_acc: mad, stopped_early })
}
