//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (from the
//! argument parser), 3 gradient-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kgvqa::bench::run_benchmark;
use kgvqa::config::RunConfig;
use kgvqa::gradcheck::run_gradcheck;
use kgvqa::knowledge::KnowledgeGraph;
use kgvqa::train::{evaluate, load_checkpoint, train};

#[derive(Parser)]
#[command(name = "kgvqa", about = "Desk-scale knowledge-graph VQA reference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; every field optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single fields, e.g. --set epochs=3 --set task="visual_only".
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> kgvqa::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        base.apply_overrides(&self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic task; writes metrics CSV and checkpoint.
    Train(ConfigArgs),
    /// Validate analytic gradients against finite differences.
    Gradcheck {
        /// Number of independently seeded tiny models.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Time the scan unit against the attention baseline.
    Bench {
        /// Comma-separated ascending sequence lengths.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Scan state size.
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Knowledge-graph utilities.
    Kg {
        #[command(subcommand)]
        command: KgCommand,
    },
    /// Evaluate a trained checkpoint on its task's held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand)]
enum KgCommand {
    /// Check a graph JSON file against the structural rules.
    Validate { file: PathBuf },
}

fn run(cli: Cli) -> kgvqa::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = train(&cfg)?;
            for row in &out.metrics {
                println!("{}", row.to_csv());
            }
            eprintln!("final eval overall accuracy: {:.4}", out.final_eval_overall);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seeds } => {
            let report = run_gradcheck(seeds, None)?;
            print!("{}", report.render());
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
        Command::Bench { lengths, d, state, repeats, out } => {
            let report = run_benchmark(&lengths, d, state, repeats)?;
            let csv = report.to_csv();
            match out {
                Some(p) => std::fs::write(p, &csv)?,
                None => print!("{csv}"),
            }
            eprintln!(
                "log-log slopes: cmm {:.3}, cross_attention {:.3}",
                report.cmm_slope, report.ca_slope
            );
            for (arch, l) in &report.widened {
                eprintln!("note: widened repetitions for {arch:?} at L={l} (timer floor)");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Kg { command: KgCommand::Validate { file } } => {
            let text = std::fs::read_to_string(&file)?;
            let graph = KnowledgeGraph::from_json(&text)?;
            graph.validate()?;
            println!("{}: valid ({} nodes)", file.display(), graph.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            let task = kgvqa::synthetic::gen_synthetic_task(
                &model.cfg,
                model.graph.clone(),
            )?;
            let row = evaluate(&model, &task.eval, 0, "eval")?;
            println!("{}", kgvqa::train::METRICS_HEADER);
            println!("{}", row.to_csv());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
