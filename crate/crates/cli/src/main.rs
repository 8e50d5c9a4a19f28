//! `cpp-lab`: generate data, train, evaluate, and summarize continual runs.
//!
//! Exit status: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use cpp_lab::harness::{
    ablation_suite, dump_pseudo_labels, evaluate_checkpoint, format_ablation, format_report, orders_sweep, read_json,
    run_experiment, write_json, Context, ExperimentConfig, RunRecord,
};
use cpp_lab::model::Model;
use cpp_lab::synthdata::{generate_dataset, save_dataset, Taxonomy};

#[derive(Parser, Debug)]
#[command(name = "cpp-lab", version, about = "Continual panoptic perception at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        things: usize,
        #[arg(long, default_value_t = 3)]
        stuff: usize,
    },
    /// Run every step of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each incremental step's fused training targets here.
        #[arg(long)]
        dump_pseudo: Option<PathBuf>,
    },
    /// Score a step checkpoint on a dataset; prints the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the module ablation table for a config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run a config under class orders a-e.
    Orders {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print the per-step table of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Error tagged with the exit status it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err = e.into();
        let code = match err.downcast_ref::<cpp_lab::Error>() {
            Some(cpp_lab::Error::Config(_)) => 2,
            _ => 1,
        };
        Failure { code, err }
    }
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(usage)
}

fn synth(seed: u64, out: &Path, n: usize, size: usize, things: usize, stuff: usize) -> Result<(), Failure> {
    let tax = Taxonomy::synthetic(things, stuff);
    tax.validate().map_err(usage)?;
    let samples = generate_dataset(seed, n, &tax, size).map_err(usage)?;
    let manifest = save_dataset(&samples, &tax, Some(seed), out)?;
    println!("wrote {} samples to {}", manifest.count, out.display());
    Ok(())
}

fn train(config: &Path, out: &Path, dump: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    if dump.is_some() && !cfg.save_checkpoints {
        return Err(usage(anyhow::anyhow!("--dump-pseudo needs save_checkpoints = true")));
    }
    let record = run_experiment(&cfg, Some(out))?;
    print!("{}", format_report(&record));
    if let Some(dump) = dump {
        let ctx = Context::build(&cfg)?;
        for pair in record.steps.windows(2) {
            let ck = pair[0].checkpoint.as_ref().context("step checkpoint missing from record")?;
            let (teacher, _) = Model::load_checkpoint(ck, None)?;
            let t = pair[1].step;
            let dir = dump.join(format!("step_{t}"));
            let n = dump_pseudo_labels(&cfg, &ctx, &teacher, t, &dir)?;
            println!("step {t}: fused targets of {n} samples in {}", dir.display());
        }
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Result<(), Failure> {
    let report = evaluate_checkpoint(checkpoint, data)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn ablate(config: &Path, out: Option<&Path>, workers: usize) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let rows = ablation_suite(&cfg, out, workers)?;
    print!("{}", format_ablation(&rows));
    if let Some(out) = out {
        write_json(&out.join(format!("{}-ablation.json", cfg.name)), &rows)?;
    }
    Ok(())
}

fn orders(config: &Path, out: Option<&Path>, workers: usize) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let sweep = orders_sweep(&cfg, out, workers)?;
    for (o, pq) in sweep.orders.iter().zip(&sweep.final_pq) {
        println!("order {o}: PQ C^a {pq:.2}");
    }
    println!("mean {:.2} ± {:.2}", sweep.mean, sweep.std);
    if let Some(out) = out {
        write_json(&out.join(format!("{}-orders.json", cfg.name)), &sweep)?;
    }
    Ok(())
}

fn report(run: &Path) -> Result<(), Failure> {
    let path = if run.is_dir() { run.join("record.json") } else { run.to_path_buf() };
    let record: RunRecord = read_json(&path)?;
    print!("{}", format_report(&record));
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth { seed, out, n, size, things, stuff } => synth(seed, &out, n, size, things, stuff),
        Command::Train { config, out, dump_pseudo } => train(&config, &out, dump_pseudo.as_deref()),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Command::Ablate { config, out, workers } => ablate(&config, out.as_deref(), workers),
        Command::Orders { config, out, workers } => orders(&config, out.as_deref(), workers),
        Command::Report { run } => report(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests print to stdout and succeed; clap exits 2 otherwise.
            e.exit();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
