//! The `pmt` command line: data generation, training, evaluation, ablation
//! grids, mode comparison, verification, and report merging.
//!
//! Exit codes: 0 success, 1 config error (including bad flags), 2 runtime
//! abort (e.g. a non-finite loss), 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::progressive::checkpoint_load;
use crate::segmetrics::evaluate_run;
use crate::synthdata::{generate, read_dataset, write_dataset, Sample};

use super::{
    ablate, compare, load_config, merge_curves, mode_label, report_merge, train_one, AblateGrid,
    ExperimentConfig, HarnessError,
};

#[derive(Parser)]
#[command(
    name = "pmt",
    version,
    about = "Progressive mean-teacher semi-supervised segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON experiment config; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key by dotted path, e.g. trainer.buffer_len_B=8.
    /// Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonOpts {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = load_config(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum GridArg {
    Toggles,
    Lambda,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it in SEGV1 format.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train one run (first seed), writing history, checkpoint, and reports.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Use a SEGV1 dataset directory instead of generating data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every sample of a SEGV1 dataset.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an ablation grid across the seed list.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, value_enum, default_value = "toggles")]
        grid: GridArg,
    },
    /// Train pmt, mt_baseline, and supervised_baseline across the seed list.
    Compare {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the full property/oracle suite; any failure exits 3.
    Verify,
    /// Merge completed run reports under a directory into summary files.
    Report {
        /// Directory containing run outputs.
        #[arg(long)]
        results: PathBuf,
        /// Also merge per-run histories into curves.csv.
        #[arg(long)]
        curves: bool,
        /// Where to write summary files (defaults to the results dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_samples(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<Sample>, HarnessError> {
    match data {
        Some(dir) => {
            let (_, samples) = read_dataset(dir)?;
            if samples.is_empty() {
                return Err(HarnessError::Config(format!(
                    "dataset at {} is empty",
                    dir.display()
                )));
            }
            let fac = cfg.net.downsample_factor();
            if samples[0].h % fac != 0 || samples[0].w % fac != 0 {
                return Err(HarnessError::Config(format!(
                    "dataset dims {}x{} not divisible by net factor {fac}",
                    samples[0].h, samples[0].w
                )));
            }
            Ok(samples)
        }
        None => Ok(generate(&cfg.data)?),
    }
}

fn dispatch(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::GenData { common } => {
            let cfg = common.load()?;
            let out = cfg.output_dir.join("dataset");
            let samples = generate(&cfg.data)?;
            write_dataset(&out, &cfg.data, &samples)?;
            println!(
                "wrote {} samples ({}x{}) to {}",
                samples.len(),
                cfg.data.height,
                cfg.data.width,
                out.display()
            );
            Ok(())
        }
        Command::Train { common, data } => {
            let cfg = common.load()?;
            let samples = load_samples(&cfg, data.as_deref())?;
            let seed = cfg.seeds[0];
            let label = mode_label(cfg.trainer.mode);
            let run_dir = cfg.output_dir.join("train").join(format!("seed_{seed}"));
            let result = train_one(&cfg, &samples, label, seed, &run_dir)?;
            println!(
                "trained {label} seed {seed}: test dice {:.4} (n={}), outputs in {}",
                result.report.dice.mean,
                result.report.dice.n,
                run_dir.display()
            );
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let cfg = common.load()?;
            let state = checkpoint_load(&checkpoint)?;
            let (_, samples) = read_dataset(&data)?;
            let echo = serde_json::json!({
                "label": "eval",
                "seed": state.cfg.seed,
                "checkpoint": checkpoint.display().to_string(),
                "eval": cfg.eval,
            });
            let report = evaluate_run(&state.net, &state.pairs, &samples, &cfg.eval, echo)?;
            let out = cfg.output_dir.join("eval");
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let csv = out.join("report.csv");
            fs::write(&csv, report.to_csv()).map_err(|e| io_err(&csv, e))?;
            let json = out.join("report.json");
            fs::write(&json, report.to_json()).map_err(|e| io_err(&json, e))?;
            println!(
                "evaluated {} samples: dice {:.4}, jaccard {:.4}, hd95 {:.4}, asd {:.4} ({} flagged)",
                report.per_sample.len(),
                report.dice.mean,
                report.jaccard.mean,
                report.hd95.mean,
                report.asd.mean,
                report.flagged
            );
            Ok(())
        }
        Command::Ablate { common, grid } => {
            let cfg = common.load()?;
            let grid = match grid {
                GridArg::Toggles => AblateGrid::Toggles,
                GridArg::Lambda => AblateGrid::Lambda,
            };
            let out = cfg.output_dir.join(match grid {
                AblateGrid::Toggles => "ablate_toggles",
                AblateGrid::Lambda => "ablate_lambda",
            });
            let (rows, failures) = ablate(&cfg, grid, &out)?;
            print!("{}", super::summary_table(&rows));
            for (label, seed, err) in &failures {
                eprintln!("cell {label} seed {seed} failed: {err}");
            }
            println!("summary written to {}", out.display());
            Ok(())
        }
        Command::Compare { common } => {
            let cfg = common.load()?;
            let out = cfg.output_dir.join("compare");
            let rows = compare(&cfg, &out)?;
            print!("{}", super::summary_table(&rows));
            println!("summary written to {}", out.display());
            Ok(())
        }
        Command::Verify => {
            let checks = crate::verify::run_all();
            let mut failures = 0usize;
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<36} {}", c.name, c.detail);
                if !c.passed {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(HarnessError::Verification(format!(
                    "{failures} of {} checks failed",
                    checks.len()
                )));
            }
            println!("all {} checks passed", checks.len());
            Ok(())
        }
        Command::Report {
            results,
            curves,
            out,
        } => {
            let out_dir = out.unwrap_or_else(|| results.clone());
            let outcome = report_merge(&results, &out_dir)?;
            print!("{}", super::summary_table(&outcome.rows));
            for p in &outcome.partial {
                eprintln!("partial run (no report.json): {}", p.display());
            }
            if curves {
                let path = out_dir.join("curves.csv");
                let merged = merge_curves(&results, &path)?;
                println!("merged {merged} histories into {}", path.display());
            }
            println!("summary written to {}", out_dir.display());
            Ok(())
        }
    }
}

/// Parses and runs; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
