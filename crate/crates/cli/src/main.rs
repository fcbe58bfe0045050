use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cored_cli::commands::{self, Ablation};
use cored_cli::{exit, CliResult, RunSpec, SpecOverrides};

/// Continual real/fake detection experiments with teacher-student
/// distillation and representation memory.
#[derive(Parser)]
#[command(name = "cored", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task family as CRD1 files.
    GenData(SpecArgs),
    /// Train task 1, then every strategy over the task sequence.
    Run(SpecArgs),
    /// Run one of the ablation studies.
    Ablate {
        #[arg(value_enum)]
        which: Ablation,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Compare analytic gradients of every loss term with finite differences.
    Gradcheck {
        /// First seed to audit
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Scale the backward rule of one op by 0.5 (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Zero-shot metrics of a checkpoint on the test split of each task.
    Eval {
        /// CRDM checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated task indices; defaults to every task of the family.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<usize>>,
        /// Also write the table as JSON to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
}

/// The run spec and the flags that override its fields.
#[derive(Args)]
struct SpecArgs {
    /// Run spec JSON; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output root [default: spec out_dir, then $CORED_OUT, then ./cored-out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory [default: <out>/data].
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated strategy names (CoReD, DL, TF, TG).
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Epoch cap per task
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl SpecArgs {
    fn load(&self) -> CliResult<RunSpec> {
        let overrides = SpecOverrides {
            out_dir: self.out.clone(),
            data_dir: self.data_dir.clone(),
            seeds: self.seeds.clone(),
            strategies: self.strategies.clone(),
            max_epochs: self.max_epochs,
        };
        RunSpec::load(self.spec.as_deref(), &overrides)
    }
}

fn execute(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::GenData(args) => {
            let spec = args.load()?;
            let files = commands::gen_data(&spec)?;
            println!("wrote {} files to {}", files.len(), spec.data_root().display());
        }
        Command::Run(args) => {
            let spec = args.load()?;
            let comparison = commands::run(&spec)?;
            print!("{}", comparison.table());
            println!("reports in {}", spec.out_root().join("run").display());
        }
        Command::Ablate { which, spec: args } => {
            let spec = args.load()?;
            let comparison = commands::ablate(&spec, which)?;
            print!("{}", comparison.table());
            println!("ranking: {}", comparison.ranking.join(" > "));
        }
        Command::Gradcheck { seed, seeds, inject_fault } => {
            let summary = commands::gradcheck(seed, seeds, inject_fault.as_deref())?;
            for (component, err) in &summary.max_errors {
                println!("{:<8} max relative error {err:.3e}", component.name());
            }
            println!("teacher  max |gradient|      {:.3e}", summary.teacher_gradient_max);
            let passed = summary.passed();
            println!(
                "{} over {} seed(s), tolerance {:e}",
                if passed { "PASS" } else { "FAIL" },
                summary.seeds.len(),
                summary.tolerance
            );
            return Ok(if passed { exit::SUCCESS } else { exit::FAILURE });
        }
        Command::Eval { checkpoint, tasks, report, spec: args } => {
            let spec = args.load()?;
            let tasks = tasks.unwrap_or_else(|| (1..=spec.family.task_count()).collect());
            let rows = commands::eval(&checkpoint, &spec.data_root(), &tasks)?;
            print!("{}", commands::metrics_table(&rows));
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n")?;
            }
        }
    }
    Ok(exit::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
