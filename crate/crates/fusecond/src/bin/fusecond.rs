use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusecond::config::{parse_lambda_override, Mode};
use fusecond::selftest::{self, Budget};
use fusecond::{inspect, run_alignment, run_pipeline, Error, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "fusecond",
    version,
    about = "Multi-image conditioned sparse-voxel generation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write all artifacts.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Strength override for one source, e.g. `local0=2.5` or `global=1`.
        #[arg(long = "lambda", value_name = "SRC=VAL")]
        lambdas: Vec<String>,
        #[arg(long)]
        beta: Option<f64>,
        /// Worker threads; `FUSECOND_THREADS` caps this. Output does not depend on it.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run encoding and alignment only and write the alignment report.
    Align {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run directory and spot-check its invariants.
    Inspect { dir: PathBuf },
    /// Compare the kernels against their naive reference implementations.
    Selftest {
        /// Use small instance counts.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: &PathBuf) -> fusecond::Result<PipelineConfig> {
    PipelineConfig::load(path)
}

fn run(cli: Cli) -> fusecond::Result<ExitCode> {
    match cli.command {
        Command::Generate { config, mode, seed, lambdas, beta, threads, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = beta {
                cfg.beta = b;
            }
            for l in &lambdas {
                let (id, v) = parse_lambda_override(l)?;
                cfg.lambda_overrides.insert(id, v);
            }
            cfg.output_dir = Some(out.clone());
            let art = run_pipeline(&cfg)?;
            art.write_to(&out)?;
            print!("{}", art.alignment_report());
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Align { config, threads, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            cfg.output_dir = Some(out.clone());
            let art = run_alignment(&cfg)?;
            art.write_to(&out)?;
            print!("{}", art.alignment_report());
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect { dir } => {
            let report = inspect(&dir)?;
            print!("{}", report.to_text());
            Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Selftest { quick, seed } => {
            let budget = if quick { Budget::QUICK } else { Budget::FULL };
            let mut ok = true;
            for o in selftest::run_all(&budget, seed) {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                ok &= o.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
