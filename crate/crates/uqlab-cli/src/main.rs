//! `uqlab`: seeded experiment driver for uncertainty-aware small models.
//!
//! Exit codes: 0 success, 2 config error, 3 input error, 4 training error.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use uqlab_core::error::Error;
use uqlab_core::gradcheck::run_catalog;
use uqlab_core::harness::{
    run_ablate, run_analyze, run_evaluate, run_generate, run_train, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "uqlab", version, about = "uncertainty-aware training and evaluation")]
struct Cli {
    /// Experiment config file (flat key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for datasets, checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test dataset files plus a provenance record.
    Generate,
    /// Train the configured variant; saves the best-validation checkpoint.
    Train,
    /// Evaluate the checkpoint on the test split, writing predictions.csv.
    Evaluate,
    /// Join predictions against the test data and emit uncertainty analyses.
    Analyze,
    /// Finite-difference gradient checks over every layer and loss.
    Gradcheck,
    /// Run all four variants end to end and emit a comparison table.
    Ablate,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) => ExitCode::from(2),
        Error::Input(_) | Error::Io(_) => ExitCode::from(3),
        Error::Training { .. } => ExitCode::from(4),
        _ => ExitCode::from(1),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate => {
            let cfg = load_config(cli)?;
            let s = run_generate(&cfg, &cli.out)?;
            println!(
                "generated {} train / {} val / {} test examples in {}",
                s.n_train,
                s.n_val,
                s.n_test,
                cli.out.display()
            );
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let trace = run_train(&cfg, &cli.out)?;
            match (trace.best_epoch, trace.epochs.last()) {
                (Some(best), Some(last)) => println!(
                    "trained {} epochs; best validation at epoch {} (final val loss {:.6})",
                    trace.epochs.len(),
                    best,
                    last.val_loss
                ),
                _ => println!("trained 0 epochs; checkpoint holds the initialization"),
            }
        }
        Command::Evaluate => {
            let cfg = load_config(cli)?;
            let m = run_evaluate(&cfg, &cli.out)?;
            if let Some(mse) = m.mse {
                println!("test mse {mse:.6}");
            }
            if let Some(acc) = m.accuracy {
                println!("test accuracy {acc:.4}");
            }
            if let Some(f1) = m.macro_f1 {
                println!("test macro f1 {f1:.4}");
            }
            if let Some(ppl) = m.perplexity {
                println!("test perplexity {ppl:.4}");
            }
            if let (Some(um), Some(ud)) = (m.mean_u_model, m.mean_u_data) {
                println!("mean u_model {um:.6}, mean u_data {ud:.6}");
            }
        }
        Command::Analyze => {
            let cfg = load_config(cli)?;
            let s = run_analyze(&cfg, &cli.out)?;
            if let Some(c) = s.entropy_u_data {
                println!(
                    "entropy vs u_data: pearson {:.4}, spearman {:.4} over {} types",
                    c.pearson, c.spearman, c.n
                );
            }
            if let Some(c) = s.class_f1_u_data {
                println!(
                    "class f1 vs u_data: pearson {:.4} over {} classes",
                    c.pearson, c.n
                );
            }
            if let Some(c) = s.group_u_data {
                println!(
                    "bin mse vs u_data: pearson {:.4}, spearman {:.4} over {} bins",
                    c.pearson, c.spearman, c.n
                );
            }
            if s.entropy_u_data.is_none() && s.class_f1_u_data.is_none() && s.group_u_data.is_none()
            {
                println!("all correlations degenerate (constant input); tables written");
            }
        }
        Command::Gradcheck => {
            let results = run_catalog()?;
            let mut failed = 0usize;
            for r in &results {
                println!(
                    "{:<28} {} (max rel err {:.3e})",
                    r.name,
                    if r.pass { "pass" } else { "FAIL" },
                    r.max_rel_err
                );
                if !r.pass {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::Evaluation(format!(
                    "{failed} gradient checks failed"
                )));
            }
        }
        Command::Ablate => {
            let cfg = load_config(cli)?;
            let rows = run_ablate(&cfg, &cli.out)?;
            for row in &rows {
                let m = &row.metrics;
                let headline = m
                    .mse
                    .map(|v| format!("mse {v:.6}"))
                    .or(m.accuracy.map(|v| format!("accuracy {v:.4}")))
                    .unwrap_or_default();
                println!("{:<10} {headline}", row.variant.name());
            }
            println!("comparison table: {}", cli.out.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
