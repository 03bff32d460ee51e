use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ensyth_cli::config::{EvalSplit, ExperimentConfig};
use ensyth_cli::pipeline::{self, with_workers, Layout};
use ensyth_cli::CliError;

#[derive(Parser, Debug)]
#[command(name = "ensyth", version, about = "Prune a trained network into a pool and search it for a voting ensemble")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for pruning and parallel prediction (default: all cores).
    #[arg(long, env = "ENSYTH_WORKERS")]
    workers: Option<usize>,
    /// Split used for elimination and per-model accuracy.
    #[arg(long, value_enum)]
    elimination_split: Option<EvalSplit>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the baseline.
    Train(Common),
    /// Prune the baseline over the grid.
    Pool {
        #[command(flatten)]
        common: Common,
        /// Baseline bundle (default: <out>/baseline.ezip).
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Backward elimination over a saved pool.
    Eliminate(Resume),
    /// Time the baseline, every member and the best ensemble.
    Bench(Resume),
    /// Plot the elimination trace.
    Report(Common),
    /// Every stage in order.
    Run(Common),
}

#[derive(Args, Debug)]
struct Resume {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Pool index (default: <out>/pool/index.json).
    #[arg(long)]
    pool: Option<PathBuf>,
}

struct Ctx {
    cfg: ExperimentConfig,
    layout: Layout,
    workers: usize,
}

fn context(c: &Common) -> Result<Ctx, CliError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(split) = c.elimination_split {
        cfg.elimination.split = split;
        cfg.validate()?;
    }
    let out = match (&c.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) if o.is_relative() => c.config.parent().unwrap_or(".".as_ref()).join(o),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            return Err(CliError::Config(
                "at `output_dir`: not set and no --out given".into(),
            ))
        }
    };
    let workers = c
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(Ctx {
        cfg,
        layout: Layout::new(out),
        workers,
    })
}

fn do_main(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let x = context(&c)?;
            with_workers(x.workers, || {
                let splits = pipeline::load_splits(&x.cfg)?;
                let digest = pipeline::train_stage(&x.cfg, &splits, &x.layout)?;
                println!("baseline {} ({digest})", x.layout.baseline().display());
                Ok(())
            })
        }
        Command::Pool { common, baseline } => {
            let x = context(&common)?;
            let baseline = baseline.unwrap_or_else(|| x.layout.baseline());
            with_workers(x.workers, || {
                let splits = pipeline::load_splits(&x.cfg)?;
                let index = pipeline::pool_stage(&x.cfg, &splits, &baseline, &x.layout)?;
                println!("pool of {} members in {}", index.members.len(), x.layout.pool_dir().display());
                Ok(())
            })
        }
        Command::Eliminate(r) => {
            let x = context(&r.common)?;
            let baseline = r.baseline.unwrap_or_else(|| x.layout.baseline());
            let pool = r.pool.unwrap_or_else(|| x.layout.pool_index());
            with_workers(x.workers, || {
                let splits = pipeline::load_splits(&x.cfg)?;
                let s = pipeline::eliminate_stage(&x.cfg, &splits, &baseline, &pool, &x.layout, x.workers)?;
                print_summary(&s);
                Ok(())
            })
        }
        Command::Bench(r) => {
            let x = context(&r.common)?;
            let baseline = r.baseline.unwrap_or_else(|| x.layout.baseline());
            let pool = r.pool.unwrap_or_else(|| x.layout.pool_index());
            with_workers(x.workers, || {
                let splits = pipeline::load_splits(&x.cfg)?;
                pipeline::bench_stage(&x.cfg, &splits, &baseline, &pool, &x.layout)?;
                println!("timings in {}", x.layout.metrics().display());
                Ok(())
            })
        }
        Command::Report(c) => {
            let x = context(&c)?;
            pipeline::report_stage(&x.layout)?;
            println!("plot {}", x.layout.svg().display());
            Ok(())
        }
        Command::Run(c) => {
            let x = context(&c)?;
            let s = with_workers(x.workers, || pipeline::run_pipeline(&x.cfg, &x.layout, x.workers))?;
            print_summary(&s);
            Ok(())
        }
    }
}

fn print_summary(s: &pipeline::Summary) {
    println!(
        "baseline {:.4}; best ensemble of {} / {} members {:.4} ({} split) {:?}",
        s.baseline_accuracy,
        s.member_count,
        s.pool_size,
        s.best_accuracy,
        s.eval_split.as_str(),
        s.best_ensemble
    );
}

fn main() -> ExitCode {
    match do_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ensyth: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
