use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use crossbody::cli::{self, VerifyKind};
use crossbody::config::SuiteEntry;
use crossbody::trainer::{train, Checkpoint, TrainOptions};
use crossbody::Config;

#[derive(Parser)]
#[command(name = "crossbody", about = "Cross-embodiment imitation-learning policy")]
struct Args {
    /// JSON configuration; the built-in desk configuration if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert datasets as XEDS1 shards in --out.
    GenData {
        /// `embodiment=count`; defaults to the four desk datasets.
        #[arg(long = "dataset", value_parser = parse_pair::<usize>)]
        datasets: Vec<(String, usize)>,
    },
    /// Train on the shards in --data, writing checkpoints to --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Restrict the mixture to these datasets (a specialist run).
        #[arg(long = "only")]
        only: Vec<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Closed-loop evaluation; writes eval_report.json to --out.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Additional `name=checkpoint` policies reported side by side.
        #[arg(long = "specialist", value_parser = parse_pair::<PathBuf>)]
        specialists: Vec<(String, PathBuf)>,
        /// Evaluate only these embodiments.
        #[arg(long = "embodiment")]
        embodiments: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run a property suite: masks, grads, mixture, relabel, format or all.
    Verify { kind: String },
    /// Print the slot layout, parameter counts and an embodiment's mask.
    Inspect {
        #[arg(long)]
        embodiment: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(String, T), String>
where
    T::Err: std::fmt::Display,
{
    let (k, v) = s.split_once('=').ok_or(format!("expected name=value, got `{s}`"))?;
    Ok((k.to_owned(), v.parse().map_err(|e: T::Err| e.to_string())?))
}

fn run(args: Args) -> anyhow::Result<bool> {
    let mut config = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::desk(),
    };
    match args.command {
        Command::GenData { datasets } => {
            let datasets = if datasets.is_empty() {
                cli::DESK_DATASETS.iter().map(|(n, c)| ((*n).to_owned(), *c)).collect()
            } else {
                datasets
            };
            for p in cli::gen_data(&args.out, &datasets, args.seed.unwrap_or(0))? {
                println!("{}", p.display());
            }
        }
        Command::Train {
            data,
            only,
            steps,
            batch,
            quiet,
        } => {
            if let Some(s) = args.seed {
                config.train.seed = s;
            }
            if let Some(s) = steps {
                config.train.total_steps = s;
            }
            if let Some(b) = batch {
                config.train.batch_size = b;
            }
            if !only.is_empty() {
                let names: Vec<&str> = only.iter().map(String::as_str).collect();
                config.mixture = config.mixture.restricted(&names);
            }
            let shards = cli::load_shards(&data)?;
            let outcome = train(&config, shards, &args.out, &TrainOptions { verbose: !quiet })?;
            println!("best checkpoint: {}", outcome.best_path().display());
        }
        Command::Eval {
            checkpoint,
            specialists,
            embodiments,
            trials,
            workers,
        } => {
            if !embodiments.is_empty() {
                config.eval.suite = embodiments
                    .into_iter()
                    .map(|embodiment| SuiteEntry {
                        embodiment,
                        trials: 100,
                    })
                    .collect();
            }
            if let Some(n) = trials {
                config.eval.suite.iter_mut().for_each(|e| e.trials = n);
            }
            let mut policies = vec![("cross".to_owned(), checkpoint)];
            policies.extend(specialists);
            let seed_base = args.seed.unwrap_or(config.eval.seed_base);
            let workers = workers.unwrap_or_else(cli::default_workers);
            let report = cli::evaluate(&config, &policies, seed_base, workers)?;
            std::fs::create_dir_all(&args.out)?;
            let path = args.out.join("eval_report.json");
            std::fs::write(&path, report.to_json())
                .with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report.table());
        }
        Command::Verify { kind } => {
            let kinds = if kind == "all" {
                VerifyKind::ALL.to_vec()
            } else {
                vec![kind.parse()?]
            };
            let mut ok = true;
            for k in kinds {
                let report = cli::verify(k, &config, args.seed.unwrap_or(0))?;
                println!("{report}");
                ok &= report.passed;
            }
            return Ok(ok);
        }
        Command::Inspect {
            embodiment,
            checkpoint,
        } => {
            if let Some(p) = checkpoint {
                let ckpt = Checkpoint::load(&p)?;
                print!("{}", cli::describe_checkpoint(&ckpt));
                config = ckpt.config;
            }
            print!("{}", cli::inspect(&config, embodiment.as_deref())?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
