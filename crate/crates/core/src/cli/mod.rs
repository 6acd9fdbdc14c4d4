//! `exitgate` commands: train, eval, route-stats and gradcheck.
//!
//! Exit status is 0 on success, 1 on a failed gradient check or an
//! unexpected I/O failure, 2 on invalid configuration or input files, and 3
//! when training diverges.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub use config::{Backbone, DataSource, DatasetKind, Entries, RunConfig};

use crate::error::{Error, Result};
use crate::inference::{routing_csv, routing_stats, CostModel, EarlyExitPolicy};
use crate::metrics::{evaluate, report_csv_header, report_csv_row, ReportLabels};
use crate::model::{checkpoint, Architecture, MultiExitNetwork};
use crate::training::train_with_observer;
use crate::verify::{gradcheck_suite, TOLERANCE};

pub const CHECKPOINT_FILE: &str = "model.mexn";
pub const LOSS_CSV_FILE: &str = "loss_curves.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REPORT_CSV_FILE: &str = "eval_report.csv";
pub const ROUTING_CSV_FILE: &str = "routing.csv";

#[derive(Debug, Parser)]
#[command(name = "exitgate", version, about = "Confidence-gated multi-exit training and early-exit inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write checkpoint, loss curves and manifest.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on the test split and write the report row.
    Eval {
        #[command(flatten)]
        target: EvalArgs,
        /// Model name for the report row; defaults to the config's regime.
        #[arg(long)]
        model: Option<String>,
    },
    /// Per-exit routing fractions, accuracy and cumulative cost.
    RouteStats {
        #[command(flatten)]
        target: EvalArgs,
    },
    /// Finite-difference check of every layer and both gated losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// key = value run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Early-exit threshold; defaults to the config's policy_tau (0.9).
    #[arg(long)]
    tau: Option<f64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Process exit status for an error.
pub fn status_of(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Train { run } => cmd_train(&run.config, &run.overrides),
        Command::Eval { target, model } => cmd_eval(&target, model.as_deref()),
        Command::RouteStats { target } => cmd_route_stats(&target),
        Command::Gradcheck { seed, inject_fault } => cmd_gradcheck(seed, inject_fault),
    };
    match outcome {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            status_of(&e)
        }
    }
}

/// Loads data, trains, and only then writes outputs, so a failed run leaves
/// nothing behind.
pub fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<i32> {
    let cfg = RunConfig::load(config_path, overrides)?;
    let (train, _) = cfg.load_data()?;
    let mut net = cfg.build_network(&train)?;
    eprintln!(
        "training {} {} on {} samples, {} epochs",
        cfg.backbone.name(),
        cfg.train.regime,
        train.len(),
        cfg.train.epochs
    );
    let start = Instant::now();
    let record = train_with_observer(&mut net, &train, &cfg.train, &mut |ep, _| {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        eprintln!(
            "epoch {:>3}  raw loss [{}]  mean gate [{}]  {:.0}s",
            ep.epoch + 1,
            fmt(&ep.raw_loss),
            fmt(&ep.mean_gate),
            start.elapsed().as_secs_f64()
        );
    })?;
    let wall = start.elapsed().as_secs_f64();

    fs::create_dir_all(&cfg.output_dir)?;
    checkpoint::save(&net, cfg.output_dir.join(CHECKPOINT_FILE))?;
    record.write_csv(cfg.output_dir.join(LOSS_CSV_FILE))?;
    let manifest = format!(
        "# exitgate {} run manifest; reusable as --config\n{}# wall_time_seconds = {wall:.3}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.echo()
    );
    fs::write(cfg.output_dir.join(MANIFEST_FILE), manifest)?;
    println!("wrote {}", cfg.output_dir.display());
    Ok(0)
}

struct Loaded {
    cfg: RunConfig,
    net: MultiExitNetwork,
    test: crate::data::Dataset,
    policy: EarlyExitPolicy,
    cost: CostModel,
    out: PathBuf,
}

fn load_target(t: &EvalArgs) -> Result<Loaded> {
    let cfg = RunConfig::load(&t.run.config, &t.run.overrides)?;
    let policy = EarlyExitPolicy::new(t.tau.unwrap_or(cfg.tau))?;
    let net = checkpoint::load(&t.checkpoint).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", t.checkpoint.display())),
        e => e,
    })?;
    let (_, test) = cfg.load_data()?;
    let expected = net.sample_shape();
    if test.sample_shape() != expected.as_slice() || test.num_classes() != net.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint expects samples {expected:?} with {} classes; dataset has {:?} with {}",
            net.num_classes(),
            test.sample_shape(),
            test.num_classes()
        )));
    }
    let cost = CostModel::from_network(&net)?;
    let out = t.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok(Loaded {
        cfg,
        net,
        test,
        policy,
        cost,
        out,
    })
}

fn report_rows(l: &Loaded, model: Option<&str>) -> Result<String> {
    let report = evaluate(&l.net, &l.test, &l.policy, &l.cost)?;
    let labels = ReportLabels {
        dataset: l.cfg.dataset.name().into(),
        task: l.cfg.dataset.task().into(),
        backbone: match l.net.architecture() {
            Architecture::Mlp(_) => "mlp".into(),
            Architecture::Cnn(_) => "cnn".into(),
        },
        model: model.map_or_else(|| l.cfg.train.regime.to_string(), String::from),
    };
    Ok(format!(
        "{}\n{}\n",
        report_csv_header(l.net.num_exits()),
        report_csv_row(&labels, &report)
    ))
}

fn cmd_eval(t: &EvalArgs, model: Option<&str>) -> Result<i32> {
    let l = load_target(t)?;
    let csv = report_rows(&l, model)?;
    fs::create_dir_all(&l.out)?;
    fs::write(l.out.join(REPORT_CSV_FILE), &csv)?;
    print!("{csv}");
    Ok(0)
}

fn cmd_route_stats(t: &EvalArgs) -> Result<i32> {
    let l = load_target(t)?;
    let stats = routing_stats(&l.net, &l.test, &l.policy, &l.cost)?;
    let csv = routing_csv(&stats);
    fs::create_dir_all(&l.out)?;
    fs::write(l.out.join(ROUTING_CSV_FILE), &csv)?;
    print!("{csv}");
    Ok(0)
}

fn cmd_gradcheck(seed: u64, inject_fault: bool) -> Result<i32> {
    crate::numerics::layers::inject_backward_fault(inject_fault);
    let reports = gradcheck_suite(seed);
    crate::numerics::layers::inject_backward_fault(false);
    let reports = reports?;
    println!("{:<28} {:>14} {:>8}  status", "case", "max_rel_error", "checked");
    for r in &reports {
        println!(
            "{:<28} {:>14.3e} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        println!("all {} cases below {TOLERANCE:e}", reports.len());
        Ok(0)
    } else {
        println!("{failed} of {} cases at or above {TOLERANCE:e}", reports.len());
        Ok(1)
    }
}
