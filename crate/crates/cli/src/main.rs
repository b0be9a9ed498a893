//! `nfbeam` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nfbeam::config::{Preset, RunConfig};
use nfbeam::eval::SweepAxis;
use nfbeam::pipeline::{self, EvalOptions, EvalSplit, GenOptions, RunManifest, SweepOptions, TrainOptions};
use nfbeam::training::{FreezeStage, Stage};
use nfbeam::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "nfbeam", version, about = "Near-field beam prediction toolkit")]
struct Cli {
    /// Run configuration (TOML); overrides --preset.
    #[arg(long, global = true, env = "NFBEAM_CONFIG")]
    config: Option<PathBuf>,
    /// Named preset used when no configuration file is given.
    #[arg(long, global = true, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled dataset file.
    GenDataset {
        #[arg(long)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        first_index: u64,
        /// Master seed; defaults to the configured rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, allow_hyphen_values = true)]
        noise_dbm: Option<f64>,
    },
    /// Masked pretraining.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        masked_only_loss: bool,
    },
    /// Next-beam fine-tuning, from a checkpoint or from scratch with --direct.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, required_unless_present = "direct", conflicts_with = "direct")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        direct: bool,
    },
    /// Accuracy, top-2 accuracy and NBG of a checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate over a range of one parameter.
    Sweep {
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated coordinates; defaults to the axis range.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1000)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        first_index: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pretrain_data: Option<PathBuf>,
        #[arg(long)]
        finetune_data: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Run the fast invariant suite.
    Selfcheck,
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    freeze_stage: Option<FreezeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FreezeArg {
    Pretrain,
    Finetune,
    None,
}

impl From<FreezeArg> for FreezeStage {
    fn from(f: FreezeArg) -> Self {
        match f {
            FreezeArg::Pretrain => FreezeStage::Pretrain,
            FreezeArg::Finetune => FreezeStage::Finetune,
            FreezeArg::None => FreezeStage::None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Test,
    All,
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    SweepAxis::parse(s).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> nfbeam::Result<RunConfig> {
    let run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(cli.preset),
    };
    run.validate()?;
    Ok(run)
}

fn apply_train_args(run: &mut RunConfig, args: &TrainArgs, stage: Stage) {
    if let Some(f) = args.freeze_stage {
        run.training.freeze_stage = f.into();
    }
    match stage {
        Stage::Pretrain => {
            if let Some(e) = args.epochs {
                run.training.pretrain_epochs = e;
            }
            if let Some(lr) = args.lr {
                run.training.pretrain_lr = lr;
            }
        }
        Stage::Finetune | Stage::Direct => {
            if let Some(e) = args.epochs {
                run.training.finetune_epochs = e;
            }
            if let Some(lr) = args.lr {
                run.training.finetune_lr = lr;
            }
        }
    }
}

fn best_accuracy(history: &[f64]) -> f64 {
    history.iter().copied().fold(0.0, f64::max)
}

fn report(m: &RunManifest) {
    for a in &m.artifacts {
        println!("wrote {a}");
    }
    info!("{} finished in {:.1} s", m.command, m.wall_clock_s);
}

fn run(cli: Cli) -> nfbeam::Result<bool> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("--jobs: {e}")))?;
    }
    let mut run = load_config(&cli)?;
    match cli.command {
        Command::GenDataset {
            count,
            out,
            first_index,
            seed,
            noise_dbm,
        } => {
            let m = pipeline::gen_dataset(
                &run,
                &GenOptions {
                    count,
                    first_index,
                    master_seed: seed,
                    noise_dbm,
                    out,
                },
            )?;
            report(&m);
        }
        Command::Pretrain {
            train,
            alpha,
            masked_only_loss,
        } => {
            apply_train_args(&mut run, &train, Stage::Pretrain);
            if let Some(a) = alpha {
                run.training.alpha = a;
            }
            run.training.masked_only_loss |= masked_only_loss;
            run.validate()?;
            let (m, o) = pipeline::train_command(
                &run,
                &TrainOptions {
                    data: train.data,
                    init: None,
                    out: train.out,
                    stage: Stage::Pretrain,
                },
            )?;
            println!(
                "best epoch {} val accuracy {:.4}",
                o.best_epoch,
                best_accuracy(&o.val_accuracy())
            );
            report(&m);
        }
        Command::Finetune { train, ckpt, direct } => {
            let stage = if direct { Stage::Direct } else { Stage::Finetune };
            apply_train_args(&mut run, &train, stage);
            run.validate()?;
            let (m, o) = pipeline::train_command(
                &run,
                &TrainOptions {
                    data: train.data,
                    init: ckpt,
                    out: train.out,
                    stage,
                },
            )?;
            println!(
                "best epoch {} val accuracy {:.4}",
                o.best_epoch,
                best_accuracy(&o.val_accuracy())
            );
            report(&m);
        }
        Command::Evaluate {
            ckpt,
            data,
            out,
            split,
            variant,
        } => {
            let split = match split {
                SplitArg::Test => EvalSplit::Test,
                SplitArg::All => EvalSplit::All,
            };
            let (m, r) = pipeline::evaluate_command(
                &run,
                &EvalOptions {
                    ckpt,
                    data,
                    out,
                    split,
                    variant,
                },
            )?;
            println!(
                "accuracy {:.4} top2 {:.4} nbg {:.4} over {} samples",
                r.accuracy, r.top2_accuracy, r.mean_nbg, r.sample_count
            );
            report(&m);
        }
        Command::Sweep {
            axis,
            ckpt,
            out,
            values,
            count,
            first_index,
            seed,
            pretrain_data,
            finetune_data,
            variant,
        } => {
            let (m, records) = pipeline::sweep_command(
                &run,
                &SweepOptions {
                    axis,
                    values: values.unwrap_or_else(|| axis.default_values()),
                    ckpt,
                    count,
                    first_index,
                    master_seed: seed,
                    pretrain_data,
                    finetune_data,
                    out_dir: out,
                    variant,
                },
            )?;
            for r in &records {
                println!(
                    "{} = {}: accuracy {:.4} top2 {:.4} nbg {:.4}",
                    r.axis, r.value, r.accuracy, r.top2_accuracy, r.mean_nbg
                );
            }
            report(&m);
        }
        Command::Selfcheck => {
            let results = nfbeam::selfcheck::run();
            let width = results.iter().map(|c| c.name.len()).max().unwrap_or(0);
            for c in &results {
                let mark = if c.passed { "PASS" } else { "FAIL" };
                println!("{mark}  {:<width$}  {:>7.3} s  {}", c.name, c.seconds, c.detail);
            }
            return Ok(results.iter().all(|c| c.passed));
        }
        Command::ShowConfig => print!("{}", run.to_toml_string()?),
    }
    Ok(true)
}

fn is_usage(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::UnknownPreset(_) | Error::TomlDe(_)
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
