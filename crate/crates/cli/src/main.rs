//! `molkd`: pre-train reaction-aware teachers, distill them into property
//! predictors, and evaluate both.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Settings;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "molkd", version, about)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; MOLKD_THREADS caps this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides a configuration key, e.g. `--set epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train a teacher encoder on a reaction TSV.
    Pretrain {
        #[arg(long)]
        reactions: Option<PathBuf>,
    },
    /// Distill a teacher into a property predictor.
    Finetune(FinetuneArgs),
    /// Rank candidate products for every reaction in a TSV.
    RankEval {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        reactions: Option<PathBuf>,
    },
    /// Nearest reference molecules by cosine distance.
    Query {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        smiles: Option<String>,
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Effect score of a predictor on perturbation pairs.
    Robustness {
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        perturbations: Option<PathBuf>,
        #[arg(long)]
        task_index: Option<usize>,
    },
    /// Per-atom weights for one molecule.
    Interpret {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        smiles: Option<String>,
    },
    /// Seeded random 8:1:1 split index files.
    Split {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    no_kd: bool,
    #[arg(long)]
    init_from_teacher: bool,
}

fn put<T: ToString>(s: &mut Settings, key: &str, v: &Option<T>) -> Result<(), CliError> {
    match v {
        Some(v) => s.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn put_path(s: &mut Settings, key: &str, v: &Option<PathBuf>) -> Result<(), CliError> {
    put(s, key, &v.as_ref().map(|p| p.display()))
}

/// Config file first, then `--set` pairs, then named flags.
fn settings(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for pair in &cli.overrides {
        s.set_pair(pair)?;
    }
    put(&mut s, "seed", &cli.seed)?;
    put_path(&mut s, "out", &cli.out)?;
    put(&mut s, "threads", &cli.threads)?;
    match &cli.command {
        Command::Pretrain { reactions } => put_path(&mut s, "reactions", reactions)?,
        Command::Finetune(a) => {
            put_path(&mut s, "data", &a.data)?;
            put_path(&mut s, "teacher", &a.teacher)?;
            put_path(&mut s, "train", &a.train)?;
            put_path(&mut s, "valid", &a.valid)?;
            put_path(&mut s, "test", &a.test)?;
            put(&mut s, "task", &a.task)?;
            put(&mut s, "beta", &a.beta)?;
            if a.no_kd {
                s.set("no_kd", "true")?;
            }
            if a.init_from_teacher {
                s.set("init_from_teacher", "true")?;
            }
        }
        Command::RankEval { teacher, reactions } => {
            put_path(&mut s, "teacher", teacher)?;
            put_path(&mut s, "reactions", reactions)?;
        }
        Command::Query {
            checkpoint,
            smiles,
            refs,
            k,
        } => {
            put_path(&mut s, "checkpoint", checkpoint)?;
            put(&mut s, "smiles", smiles)?;
            put_path(&mut s, "refs", refs)?;
            put(&mut s, "k", k)?;
        }
        Command::Robustness {
            predictor,
            perturbations,
            task_index,
        } => {
            put_path(&mut s, "predictor", predictor)?;
            put_path(&mut s, "perturbations", perturbations)?;
            put(&mut s, "task_index", task_index)?;
        }
        Command::Interpret { checkpoint, smiles } => {
            put_path(&mut s, "checkpoint", checkpoint)?;
            put(&mut s, "smiles", smiles)?;
        }
        Command::Split { n, data } => {
            put(&mut s, "n", n)?;
            put_path(&mut s, "data", data)?;
        }
    }
    Ok(s)
}

fn thread_count(s: &Settings) -> Result<Option<usize>, CliError> {
    let requested: Option<usize> = s.get("threads")?;
    let cap = match std::env::var("MOLKD_THREADS") {
        Ok(v) if !v.trim().is_empty() => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("MOLKD_THREADS={v:?} is not a thread count")))?,
        ),
        _ => None,
    };
    let n = match (requested, cap) {
        (Some(r), Some(c)) => Some(r.min(c)),
        (r, c) => r.or(c),
    };
    match n {
        Some(0) => Err(CliError::Config("thread count must be positive".into())),
        n => Ok(n),
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let s = settings(cli)?;
    if let Some(n) = thread_count(&s)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let output = match &cli.command {
        Command::Pretrain { .. } => commands::pretrain(&s)?,
        Command::Finetune(_) => commands::finetune_cmd(&s)?,
        Command::RankEval { .. } => commands::rank_eval(&s)?,
        Command::Query { .. } => commands::query(&s)?,
        Command::Robustness { .. } => commands::robustness(&s)?,
        Command::Interpret { .. } => commands::interpret(&s)?,
        Command::Split { .. } => commands::split(&s)?,
    };
    output.commit(commands::output_dir(&s).as_deref())?;
    print!("{}", output.stdout);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("molkd: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(inner) = source {
                eprintln!("  caused by: {inner}");
                source = inner.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
