use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cloodbench::config::ExperimentConfig;
use cloodbench::runner::{emit_results, gen_data, load_results, recompute_from_dir, run_experiment};
use cloodbench::Result;

#[derive(Parser)]
#[command(
    name = "cloodbench",
    version,
    about = "Class-incremental learning with OOD detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `stream.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `run.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic stream and outlier set described by a config as CSV files.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Recompute metrics from the CSV files of a results directory.
    Eval {
        #[arg(long)]
        results: PathBuf,
    },
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.stream.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let output = run_experiment(&cfg)?;
            emit_results(&output, &cfg.out_dir)?;
            let s = &output.record.summary;
            println!(
                "ACA {}  AIA {}  AF {}",
                fmt(s.mean_aca),
                fmt(s.mean_aia),
                fmt(s.mean_af)
            );
            for d in &s.detectors {
                println!(
                    "{:<12} AUROC {}  FPR@95 {}",
                    d.detector.to_string(),
                    fmt(d.mean_auroc),
                    fmt(d.mean_fpr95)
                );
            }
            println!("results written to {}", cfg.out_dir.display());
            let failed: Vec<_> = output
                .record
                .repetitions
                .iter()
                .filter_map(|r| r.error.as_ref().map(|e| (r.repetition, e)))
                .collect();
            for (rep, e) in &failed {
                eprintln!("repetition {rep} failed during {}: {}", e.stage, e.message);
            }
            Ok(failed.is_empty())
        }
        Command::GenData { spec, out } => {
            let cfg = ExperimentConfig::load(&spec)?;
            for p in gen_data(&cfg, &out)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Eval { results } => {
            let r = recompute_from_dir(&results)?;
            for (rep, (aca, aia, af)) in &r.cl {
                println!("repetition {rep}: ACA {aca:.4}  AIA {aia:.4}  AF {}", fmt(*af));
            }
            for ((det, rep), points) in &r.ood {
                let per_t: Vec<String> = points
                    .iter()
                    .map(|p| format!("t={} {}", p.t, fmt(p.auroc)))
                    .collect();
                let vals: Vec<f64> = points.iter().filter_map(|p| p.auroc).collect();
                let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                println!("{det:<12} rep {rep}: AUROC {}  [{}]", fmt(mean), per_t.join(", "));
            }
            if let Ok(rec) = load_results(&results) {
                println!("schema {}  config {}", rec.schema_version, rec.config_hash);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
