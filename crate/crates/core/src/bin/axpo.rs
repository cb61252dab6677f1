//! Command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use axpo_core::coverage::{coverage_sweep, write_sweep, SWEEP_HEADER};
use axpo_core::diagnostics::{metrics_from_records, write_histograms, write_metrics, METRICS_HEADER};
use axpo_core::harness::{compare, gradcheck, train, Algorithm, RunConfig, OUTPUT_ROOT_VAR};
use axpo_core::trajectory::read_log;
use axpo_core::Result;

#[derive(Parser)]
#[command(name = "axpo", version, about = "GRPO and tool-call resampling on a synthetic agentic environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over all its seeds.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue each seed from its last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Closed-form vs Monte Carlo coverage sweep as CSV.
    Coverage {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.6")]
        q: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.5")]
        p_tool: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.5")]
        p_prefix: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16")]
        n: Vec<u32>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute per-step metrics from a trajectory log.
    Diag {
        /// A seed directory or a trajectories.jsonl file.
        path: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the tool-use histogram here.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Check the analytic surrogate gradient against finite differences.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the final metrics of two runs.
    Compare { run_a: PathBuf, run_b: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long, env = OUTPUT_ROOT_VAR)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long = "group-size", short = 'n')]
    group_size: Option<usize>,
    #[arg(long = "resample-k", short = 'k')]
    resample_k: Option<usize>,
    #[arg(long = "resample-ratio", short = 'r')]
    resample_ratio: Option<f64>,
    #[arg(long = "questions-per-step", short = 'b')]
    questions_per_step: Option<usize>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    eps_low: Option<f64>,
    #[arg(long)]
    eps_high: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    eval_every: Option<u32>,
    #[arg(long)]
    eval_rollouts: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u32>,
    /// Any config key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let cfg = self.unchecked()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn unchecked(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        apply!(
            algorithm, output_dir, env, group_size, resample_k, resample_ratio, questions_per_step, steps, seeds,
            eps_low, eps_high, beta, lr, epochs, eval_every, eval_rollouts, checkpoint_every
        );
        if self.run_name.is_some() {
            cfg.run_name = self.run_name.clone();
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| axpo_core::Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = run.config()?;
            let summary = train(&cfg, resume)?;
            println!("run directory: {}", summary.run_dir.display());
            for s in &summary.seeds {
                let last_train = s.metrics.iter().rev().find(|m| m.tool_use_rate.is_some());
                let last_eval = s.metrics.iter().rev().find(|m| m.pass1_eval.is_some());
                println!(
                    "seed {:>4}: tool_use_rate {:.4}  all_wrong_tool {:.4}  pass1 {:.4}  pass4 {:.4}",
                    s.seed,
                    last_train.and_then(|m| m.tool_use_rate).unwrap_or(f64::NAN),
                    last_train.and_then(|m| m.all_wrong_tool).unwrap_or(f64::NAN),
                    last_eval.and_then(|m| m.pass1_eval).unwrap_or(f64::NAN),
                    last_eval.and_then(|m| m.pass4_eval).unwrap_or(f64::NAN),
                );
            }
        }
        Command::Coverage { q, p_tool, p_prefix, n, trials, seed, out } => {
            let rows = coverage_sweep(&q, &p_tool, &p_prefix, &n, trials, seed)?;
            match out {
                Some(path) => write_sweep(path, &rows)?,
                None => {
                    println!("{SWEEP_HEADER}");
                    rows.iter().for_each(|r| println!("{}", r.csv()));
                }
            }
        }
        Command::Diag { path, out, histogram } => {
            let log = if path.is_dir() { path.join(axpo_core::harness::TRAJECTORY_FILE) } else { path };
            let rows = metrics_from_records(&read_log(&log)?)?;
            match out {
                Some(p) => write_metrics(p, &rows)?,
                None => {
                    println!("{METRICS_HEADER}");
                    rows.iter().for_each(|r| println!("{}", r.csv()));
                }
            }
            if let Some(h) = histogram {
                write_histograms(h, &rows)?;
            }
        }
        Command::Gradcheck { run, cases, seed } => {
            // A gradient check only needs a small batch.
            let mut cfg = run.unchecked()?;
            cfg.questions_per_step = cfg.questions_per_step.min(4);
            cfg.validate()?;
            let report = gradcheck(&cfg, cases, seed)?;
            for c in &report.cases {
                println!(
                    "case {:>2} {:<14} params {:>5} steps {:>5} clipped {:>4} excluded {:>3}  max_abs {:.3e}  max_rel {:.3e}",
                    c.index,
                    serde_json::to_value(c.regime).unwrap().as_str().unwrap_or_default(),
                    c.params_checked,
                    c.unmasked_steps,
                    c.clipped_steps,
                    c.excluded_steps,
                    c.max_abs,
                    c.max_rel
                );
            }
            println!(
                "max_abs {:.3e}  max_rel {:.3e}  excluded steps {}",
                report.max_abs, report.max_rel, report.excluded_steps
            );
        }
        Command::Compare { run_a, run_b } => {
            print!("{}", compare(run_a, run_b)?.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
