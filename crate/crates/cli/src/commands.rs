// Subcommand implementations: train, eval, sweep, verify, dump-samples.
//
// Outputs land under the configured directory:
//   config.toml    resolved configuration snapshot
//   metrics.jsonl  one JSON object per evaluation point
//   runs.jsonl     (sweep) one JSON object per run
//   summary.json   machine-readable final summary
//   model.hqlt     binary checkpoint (best run's, for sweeps)

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hqlt_core::rng::Rng;
use hqlt_core::tasks::{evaluate, TaskSpec};
use hqlt_core::trainer::{final_eval_seed, lr_sweep, train_observed, EvalPoint, RunRecord};
use hqlt_core::verify;

use crate::config::ExperimentConfig;
use crate::runner::ThreadedRunner;
use crate::{checkpoint, CliError};

fn eval_point_json(p: &EvalPoint) -> serde_json::Value {
    serde_json::json!({
        "step": p.step,
        "loss": if p.train_loss.is_nan() { serde_json::Value::Null } else { p.train_loss.into() },
        "raw_acc": p.raw_acc,
        "norm_acc": p.norm_acc,
    })
}

fn run_record_json(r: &RunRecord) -> serde_json::Value {
    serde_json::json!({
        "lr": r.lr,
        "seed": r.seed,
        "steps_run": r.steps_run,
        "final_raw_acc": r.final_raw_acc,
        "final_norm_acc": r.final_norm_acc,
        "best_norm_acc": r.best_norm_acc,
        "diverged": r.diverged,
        "early_stopped": r.early_stopped,
        "wall_secs": r.wall_secs,
        "eval_points": r.eval_points.iter().map(eval_point_json).collect::<Vec<_>>(),
    })
}

fn prepare_output(exp: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&exp.output.dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), exp.to_toml())?;
    Ok(dir)
}

/// Train a single run at `train.lr`, writing metrics, a checkpoint, and a
/// summary. Divergence keeps partial results and exits 2.
pub fn cmd_train(exp: &ExperimentConfig) -> Result<(), CliError> {
    let task = exp.task_spec()?;
    let model_cfg = exp.model_config()?;
    let tc = exp.train_config()?;
    let dir = prepare_output(exp)?;

    let mut metrics = fs::File::create(dir.join("metrics.jsonl"))?;
    let mut on_eval = |p: &EvalPoint| {
        let line = eval_point_json(p);
        let _ = writeln!(metrics, "{line}");
        let _ = metrics.flush();
        eprintln!(
            "step {:>6}  loss {:>9.5}  raw {:>6.2}%  norm {:>7.2}%",
            p.step, p.train_loss, p.raw_acc, p.norm_acc
        );
    };

    let runner = ThreadedRunner::from_env();
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64();
    let (record, params) = train_observed(
        &model_cfg,
        &task,
        &tc,
        exp.train.lr,
        exp.seed,
        &runner,
        &clock,
        Some(&mut on_eval),
    )?;

    checkpoint::save(&dir.join("model.hqlt"), exp, &model_cfg, &params)?;
    let summary = run_record_json(&record);
    fs::write(dir.join("summary.json"), format!("{summary}\n"))?;
    println!("{summary}");

    if record.diverged {
        return Err(CliError::diverged(format!(
            "training diverged at step {}; partial results in {}",
            record.steps_run,
            dir.display()
        )));
    }
    Ok(())
}

/// Evaluate a checkpoint on freshly generated held-out lengths. With the
/// defaults (same seed, same sample count) this reproduces the final
/// evaluation of the run that wrote the checkpoint.
pub fn cmd_eval(
    ckpt_path: &Path,
    config_override: Option<&ExperimentConfig>,
    samples: Option<usize>,
    eval_seed: Option<u64>,
) -> Result<(), CliError> {
    let (exp, flat) = match config_override {
        Some(exp) => {
            let model_cfg = exp.model_config()?;
            let (_, flat) = checkpoint::load(ckpt_path, Some(&model_cfg))?;
            (exp.clone(), flat)
        }
        None => checkpoint::load(ckpt_path, None)?,
    };
    let task = exp.task_spec()?;
    let model_cfg = exp.model_config()?;
    let n = samples.unwrap_or(exp.train.final_eval_samples);
    let seed = eval_seed.unwrap_or_else(|| final_eval_seed(exp.seed));
    let (raw, norm) = evaluate(&model_cfg, &flat, &task, n, true, seed)?;
    let out = serde_json::json!({
        "raw_acc": raw,
        "norm_acc": norm,
        "samples": n,
        "eval_seed": seed,
    });
    println!("{out}");
    Ok(())
}

/// Full learning-rate x seed grid. Per-run records stream to runs.jsonl;
/// the summary reports the best run and the median/MAD over seeds at the
/// best learning rate. `stop_at` ends the grid once a run clears the
/// threshold.
pub fn cmd_sweep(exp: &ExperimentConfig, stop_at: Option<f64>) -> Result<(), CliError> {
    let task = exp.task_spec()?;
    let model_cfg = exp.model_config()?;
    let tc = exp.train_config()?;
    let dir = prepare_output(exp)?;

    let mut runs = fs::File::create(dir.join("runs.jsonl"))?;
    let mut on_run = |r: &RunRecord| {
        let line = run_record_json(r);
        let _ = writeln!(runs, "{line}");
        let _ = runs.flush();
        eprintln!(
            "run lr={:<8} seed={:<3} -> norm {:.2}%{}{}",
            r.lr,
            r.seed,
            r.final_norm_acc,
            if r.diverged { " [diverged]" } else { "" },
            if r.early_stopped { " [early stop]" } else { "" },
        );
    };

    let runner = ThreadedRunner::from_env();
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64();
    let sweep = lr_sweep(
        &model_cfg,
        &task,
        &tc,
        exp.seed,
        &runner,
        &clock,
        stop_at,
        Some(&mut on_run),
    )?;

    let best = &sweep.records[sweep.best_index];
    checkpoint::save(&dir.join("model.hqlt"), exp, &model_cfg, &sweep.best_params)?;
    let summary = serde_json::json!({
        "runs": sweep.records.len(),
        "best_lr": best.lr,
        "best_seed": best.seed,
        "best_norm_acc": best.final_norm_acc,
        "best_raw_acc": best.final_raw_acc,
        "median_norm_acc": sweep.median_norm_acc,
        "mad_norm_acc": sweep.mad_norm_acc,
        "stopped_early": sweep.stopped_early,
    });
    fs::write(dir.join("summary.json"), format!("{summary}\n"))?;
    println!("{summary}");

    if sweep.records.iter().all(|r| r.diverged) {
        return Err(CliError::diverged("every run in the sweep diverged".into()));
    }
    Ok(())
}

/// Run a verification suite and report one line per check; any failure
/// exits 3.
pub fn cmd_verify(suite: &str) -> Result<(), CliError> {
    let checks = match suite {
        "grad" => verify::grad_suite(),
        "equivalence" => verify::equivalence_suite(),
        "invariants" => verify::invariants_suite(),
        "all" => verify::all_suites(),
        other => {
            return Err(CliError::config(format!(
                "unknown suite '{other}' (expected grad, equivalence, invariants or all)"
            )))
        }
    };
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {} — {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    println!("{} checks, {} failed", checks.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::verify_failed(format!("failing checks: {}", failed.join(", "))))
    }
}

/// Write generated samples as "symbols<TAB>label" lines.
pub fn cmd_dump_samples(
    task_kind: &str,
    count: usize,
    seed: u64,
    test_range: bool,
    length: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let task = match task_kind {
        "parity" => TaskSpec::parity(),
        "mod_arith" => TaskSpec::mod_arith(),
        other => return Err(CliError::config(format!("unknown task '{other}'"))),
    };
    let mut rng = Rng::new(seed);
    let mut lines = String::new();
    for _ in 0..count {
        let sample = match length {
            Some(len) => task.generate(&mut rng, len)?,
            None if test_range => task.sample_test(&mut rng),
            None => task.sample_train(&mut rng),
        };
        lines.push_str(&task.dump_line(&sample));
        lines.push('\n');
    }
    match out {
        Some(path) => fs::write(path, lines)?,
        None => print!("{lines}"),
    }
    Ok(())
}
