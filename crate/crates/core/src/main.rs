use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use neurocal::dataset::Dataset;
use neurocal::harness::{
    evaluate_point, load_prepared, parse_methods, point_datasets, prepare_method, run_bench, run_experiment,
    save_prepared, EvalReport, ExperimentConfig, Method,
};
use neurocal::Result;

#[derive(Parser)]
#[command(
    name = "neurocal",
    version,
    about = "Neural calibration of massive-MIMO downlink beamforming"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test sets of the first sweep point.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory; receives train.bin and test.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train learned methods at the first sweep point and save checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; one subdirectory per method.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate saved checkpoints at the first sweep point.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV report path; defaults to the config's output_path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample inference timing of every method at every sweep point.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Samples timed per point.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Full experiment: train and evaluate every method at every sweep point.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the dataset and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated method list; overrides the config.
    #[arg(long)]
    methods: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.dataset.seed = seed;
            cfg.hyper.seed = seed;
        }
        if let Some(list) = &self.methods {
            cfg.methods = parse_methods(list)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let sys = cfg.point_config(0)?;
            let (train, test) = point_datasets(&sys, &cfg.dataset, true, true)?;
            std::fs::create_dir_all(&out)?;
            for (name, samples) in [("train.bin", train), ("test.bin", test)] {
                let n = samples.len();
                Dataset::new(sys.antennas, sys.users, sys.pilot_length, samples).save(out.join(name))?;
                info!("wrote {n} samples to {}", out.join(name).display());
            }
        }
        Command::Train { common, checkpoint } => {
            let cfg = common.load()?;
            let sys = cfg.point_config(0)?;
            let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.is_learned()).collect();
            let pilots = methods.iter().any(|m| m.needs_pilots());
            let (train, test) = point_datasets(&sys, &cfg.dataset, pilots, true)?;
            std::fs::create_dir_all(&checkpoint)?;
            for method in methods {
                let prepared = prepare_method(method, &train, &test, &sys, &cfg.hyper, &cfg.wmmse)?;
                save_prepared(&checkpoint, &prepared, &sys, &cfg.hyper, cfg.dataset.seed)?;
                info!("saved {method} under {}", checkpoint.display());
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            out,
        } => {
            let cfg = common.load()?;
            let sys = cfg.point_config(0)?;
            let pilots = cfg.methods.iter().any(|m| m.needs_pilots());
            let (_, test) = point_datasets(&sys, &cfg.dataset, pilots, false)?;
            let prepared = cfg
                .methods
                .iter()
                .map(|&m| load_prepared(&checkpoint, m, &cfg.wmmse))
                .collect::<Result<Vec<_>>>()?;
            let timing = cfg.record_timings.then_some(cfg.timing_repeats);
            let rows = evaluate_point(&prepared, &test, &cfg.point_spec(0), &sys, timing)?;
            let report = EvalReport { rows };
            report.write_csv(out.unwrap_or(cfg.output_path))?;
        }
        Command::Bench { common, out, samples } => {
            let cfg = common.load()?;
            let report = run_bench(&cfg, samples)?;
            let path = out.unwrap_or(cfg.output_path);
            report.write_csv(&path)?;
            print!("{}", report.to_csv()?);
        }
        Command::Sweep { common, out } => {
            let mut cfg = common.load()?;
            if let Some(out) = out {
                cfg.output_path = out;
            }
            let report = run_experiment(&cfg)?;
            if report.has_failures() {
                return Err(neurocal::Error::Config(
                    "one or more methods diverged; see FAILED rows".into(),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
