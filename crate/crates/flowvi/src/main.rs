use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowvi::cli::{self, CertifyOptions, RunConfig};
use flowvi::equivalence::Mutation;
use flowvi::error::Error;
use flowvi::modelzoo::BenchmarkName;

/// Variational inference benchmarks with model-informed autoregressive flows.
#[derive(Parser)]
#[command(name = "flowvi", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run config (learning-rate sweep) and write a result record.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Reduced desk budget.
        #[arg(long)]
        quick: bool,
        /// Sweep parallelism.
        #[arg(long, default_value_t = 2)]
        jobs: usize,
        /// Override the output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the flow-variant ablation table for one model.
    Ablation {
        #[arg(long)]
        model: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 2)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full and noise-conditioned flow across hidden widths.
    CapacitySweep {
        #[arg(long)]
        model: String,
        /// Comma-separated ascending hidden widths, e.g. 1,16,256.
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 2)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the equivalence certification checks.
    Certify {
        /// Trials per check.
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        /// Value-equivalence tolerance.
        #[arg(long, default_value_t = 1e-8)]
        tol_value: f64,
        /// Affinity-residual tolerance.
        #[arg(long, default_value_t = 1e-10)]
        tol_affinity: f64,
        /// Pointwise-identity tolerance.
        #[arg(long, default_value_t = 1e-9)]
        tol_kl: f64,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// Self-test: corrupt a construction formula; certification must fail.
        #[arg(long, value_parser = parse_mutation)]
        self_test_mutation: Option<Mutation>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a trained family to CSV (columns z1..zD).
    EmitSamples {
        /// Result record written by `run`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mutation(s: &str) -> Result<Mutation, String> {
    match s {
        "drop-lambda-from-scale" => Ok(Mutation::DropLambdaFromScale),
        "drop-noise-from-translation" => Ok(Mutation::DropNoiseFromTranslation),
        "shift-uses-lambda-mean" => Ok(Mutation::ShiftUsesLambdaMean),
        other => Err(format!(
            "unknown mutation '{other}' (drop-lambda-from-scale, drop-noise-from-translation, shift-uses-lambda-mean)"
        )),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Data(_) | Error::Model(_) => 2,
        Error::Training(_) | Error::Domain(_) | Error::OracleInvalid(_) => 3,
        Error::Certification(_) => 4,
        Error::Io(_) | Error::Serde(_) => 2,
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Run { config, seed, quick, jobs, out } => RunConfig::load(&config)
            .map(|mut cfg| {
                if let Some(seed) = seed {
                    let mut train = cfg.train.clone().unwrap_or_else(|| {
                        cfg.model.parse().map(cli::default_train).unwrap_or_default()
                    });
                    train.seed = seed;
                    cfg.train = Some(train);
                }
                cfg
            })
            .and_then(|cfg| cli::cmd_run(cfg, quick, jobs, out))
            .map(|_| ()),
        Command::Ablation { model, seed, quick, jobs, out } => model
            .parse::<BenchmarkName>()
            .and_then(|name| cli::cmd_ablation(name, None, quick, jobs, out, seed))
            .map(|_| ()),
        Command::CapacitySweep { model, widths, seed, jobs, out } => model
            .parse::<BenchmarkName>()
            .and_then(|name| cli::cmd_capacity_sweep(name, &widths, None, jobs, out, seed))
            .map(|_| ()),
        Command::Certify { trials, tol_value, tol_affinity, tol_kl, seed, self_test_mutation, out } => {
            let opts = CertifyOptions {
                trials: trials as usize,
                value_tol: tol_value,
                affinity_tol: tol_affinity,
                kl_tol: tol_kl,
                seed,
                mutation: self_test_mutation.unwrap_or(Mutation::None),
            };
            cli::cmd_certify(&opts, out).and_then(|passed| {
                if passed {
                    Ok(())
                } else {
                    Err(Error::Certification("one or more checks failed; see report".into()))
                }
            })
        }
        Command::EmitSamples { params, n, seed, out } => {
            cli::cmd_emit_samples(&params, n, seed, &out).map(|_| ())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
