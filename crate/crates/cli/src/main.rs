use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hqlt_cli::commands;
use hqlt_cli::config::{ExperimentConfig, Overrides};
use hqlt_cli::CliError;

/// Hybrid quadratic-linear sequence memory: train, evaluate and verify
/// sliding-window attention combined with delta-rule fast weights on
/// regular-language benchmarks.
#[derive(Parser)]
#[command(name = "hqlt", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task: parity or mod_arith.
    #[arg(long)]
    task: Option<String>,
    /// Memory scheme: synchronous, delayed_stream, delayed_chunk, kv_only,
    /// fw_only.
    #[arg(long)]
    variant: Option<String>,
    /// Fast-weight update rule: delta or linear.
    #[arg(long)]
    update_rule: Option<String>,
    /// Output mixer: sum, scalar or vector.
    #[arg(long)]
    mixer: Option<String>,
    /// KV-memory window size S.
    #[arg(long)]
    window: Option<usize>,
    /// Chunk length for the delayed_chunk scheme.
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Model hidden size.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Delta-rate scale: 1 or 2 times sigmoid.
    #[arg(long)]
    sigma_scale: Option<f64>,
    /// Rotary position encoding inside KV-memory.
    #[arg(long)]
    use_rope: Option<bool>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate for `train` (sweeps use the config's lr_list).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Stop a run once held-out normalized accuracy reaches this.
    #[arg(long)]
    early_stop: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut exp = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        exp.apply(&Overrides {
            seed: self.seed,
            task: self.task.clone(),
            variant: self.variant.clone(),
            update_rule: self.update_rule.clone(),
            mixer: self.mixer.clone(),
            window: self.window,
            chunk_size: self.chunk_size,
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            sigma_scale: self.sigma_scale,
            use_rope: self.use_rope,
            batch: self.batch,
            steps: self.steps,
            lr: self.lr,
            out: self.out.clone(),
            early_stop: self.early_stop,
        });
        Ok(exp)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write metrics, a checkpoint and a summary.
    Train(RunArgs),
    /// Evaluate a checkpoint on freshly generated held-out lengths.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional config; defaults to the snapshot inside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        /// Sample-generation seed; defaults to the training run's final
        /// evaluation seed, reproducing its numbers exactly.
        #[arg(long)]
        eval_seed: Option<u64>,
    },
    /// Run the full learning-rate x seed grid and report best and
    /// median/MAD normalized accuracy.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Stop the grid once a run's final normalized accuracy reaches
        /// this threshold.
        #[arg(long)]
        stop_at: Option<f64>,
    },
    /// Run verification suites: grad, equivalence, invariants, or all.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Write generated task samples as text lines.
    DumpSamples {
        #[arg(long, default_value = "parity")]
        task: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw from the held-out length range instead of the training one.
        #[arg(long, default_value_t = false)]
        test_range: bool,
        /// Fixed sequence length instead of range sampling.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train(args) => commands::cmd_train(&args.resolve()?),
        Cmd::Eval { checkpoint, config, samples, eval_seed } => {
            let exp = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        CliError::config(format!("cannot read {}: {e}", path.display()))
                    })?;
                    Some(ExperimentConfig::from_toml(&text)?)
                }
                None => None,
            };
            commands::cmd_eval(&checkpoint, exp.as_ref(), samples, eval_seed)
        }
        Cmd::Sweep { run, stop_at } => commands::cmd_sweep(&run.resolve()?, stop_at),
        Cmd::Verify { suite } => commands::cmd_verify(&suite),
        Cmd::DumpSamples { task, count, seed, test_range, length, out } => {
            commands::cmd_dump_samples(&task, count, seed, test_range, length, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit cleanly; usage mistakes are
            // configuration errors (exit 1).
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
