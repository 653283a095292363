use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sharpkit::data::Split;
use sharpkit::experiments::{
    build_model, data_for_model, fmt_sig, load_outcome, prepare_data, run_experiment,
    run_training_on, ExperimentConfig, ExperimentKind, SweepOptions,
};
use sharpkit::nn::Checkpoint;
use sharpkit::sharpness::{estimate_sharpness, ProbeMethod, SharpnessConfig};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "SHARPKIT_OUT";

#[derive(Parser)]
#[command(name = "sharpkit", version, about = "Sharpness-aware training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config (or just --seed).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: $SHARPKIT_OUT/<name>, else runs/<name>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run experiment A, B or C over the config's seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_experiment)]
        experiment: ExperimentKind,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Estimate the sharpness of a checkpoint on the config's training data.
    Sharpness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        adaptive: bool,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value = "combined")]
        method: ProbeMethod,
        /// Number of training examples to probe on [default: sharpness.slice].
        #[arg(long)]
        slice: Option<usize>,
    },
    /// Summarize a sweep or training output directory.
    Report {
        #[arg(long)]
        experiment_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

fn parse_experiment(s: &str) -> Result<ExperimentKind, String> {
    s.parse()
}

fn default_out(name: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}

fn run(command: Command) -> sharpkit::Result<()> {
    match command {
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::Sweep {
            config,
            experiment,
            out,
            jobs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| default_out(&cfg.name));
            let opts = SweepOptions {
                jobs,
                out_dir: Some(out.clone()),
                verbose: true,
            };
            let outcome = run_experiment(experiment, &cfg, &opts)?;
            print!("{}", outcome.markdown());
            eprintln!("wrote {} runs to {}", outcome.runs.len(), out.display());
            Ok(())
        }
        Command::Sharpness {
            checkpoint,
            config,
            rho,
            adaptive,
            probes,
            probe_seed,
            eta,
            method,
            slice,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ckpt = Checkpoint::read(&checkpoint)?;
            let data = data_for_model(&cfg.model, &prepare_data(&cfg.dataset)?);
            let mut model = build_model(&cfg.model, &data, cfg.seeds[0])?;
            ckpt.apply_to(&mut model)?;
            let probe = data.train.head(slice.unwrap_or(cfg.sharpness.slice));
            let default_rho = if adaptive {
                cfg.sharpness.adaptive_rho
            } else {
                cfg.sharpness.rho
            };
            let sc = SharpnessConfig {
                rho: rho.unwrap_or(default_rho),
                probes: probes.unwrap_or(cfg.sharpness.probes),
                adaptive,
                eta: eta.unwrap_or(cfg.sharpness.eta),
                method,
                seed: probe_seed,
            };
            let est = estimate_sharpness(&model, &probe.features, &probe.labels, &sc)?;
            println!("{}", est.csv_line());
            Ok(())
        }
        Command::Report {
            experiment_dir,
            format,
        } => {
            let outcome = load_outcome(&experiment_dir)?;
            match format {
                Format::Csv => print!("{}", outcome.aggregate.to_csv()),
                Format::Md => print!("{}", outcome.markdown()),
            }
            Ok(())
        }
    }
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> sharpkit::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let out = out.unwrap_or_else(|| default_out(&cfg.name));
    let data = prepare_data(&cfg.dataset)?;
    let single = cfg.seeds.len() == 1;
    for &s in &cfg.seeds {
        let result = run_training_on(&cfg, s, &data)?;
        let dir = if single { out.clone() } else { out.join(&result.run_id) };
        result.write_dir(&dir)?;
        let test = result.final_record(Split::Test);
        let train = result.final_record(Split::Train);
        println!(
            "{}: epoch {} train_loss {} test_accuracy {} -> {}",
            result.run_id,
            test.epoch,
            fmt_sig(train.loss),
            fmt_sig(test.accuracy),
            dir.display()
        );
    }
    Ok(())
}
