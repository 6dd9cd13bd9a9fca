use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use volterra_lab::harness::{
    emit_report, lookup, run_experiment, run_suite, ComparisonVerdict, ReportFormat, ScenarioConfig, REGISTRY,
};
use volterra_lab::LabError;

#[derive(Parser)]
#[command(name = "volterra-lab", version, about = "Comparison-theorem experiments on binary lattices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List registered scenarios.
    List,
    /// Run one scenario and write its report.
    Run {
        #[arg(long)]
        scenario: Option<String>,
        /// JSON config; command-line flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<ReportFormat>,
        /// Record runtimes (the report is then not byte-stable).
        #[arg(long)]
        timings: bool,
    },
    /// Run every scenario with its defaults into one report.
    Suite {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
        #[arg(long)]
        timings: bool,
    },
    /// Print the hypothesis flags of one scenario without the verdict.
    Hypotheses {
        #[arg(long)]
        scenario: String,
    },
}

fn print_registry() {
    eprintln!("available scenarios:");
    for s in REGISTRY {
        eprintln!("  {:<22} {}", s.name, s.description);
    }
}

fn print_verdict(v: &ComparisonVerdict) {
    println!(
        "{:<22} {:<30} worst={:.3e} tol={:.1e} {}",
        v.scenario,
        v.theorem,
        v.worst_violation,
        v.tolerance,
        v.summary()
    );
    println!("    hypotheses: {}", v.hypotheses);
    if let Some(w) = &v.witness {
        println!("    witness: {w}");
    }
    for (name, value) in &v.metrics {
        println!("    {name} = {value:.6e}");
    }
}

fn extension(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
    }
}

fn exit_for(verdicts: &[ComparisonVerdict]) -> ExitCode {
    if verdicts.iter().all(ComparisonVerdict::matches_expectation) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode, LabError> {
    match cli.command {
        Command::List => {
            for s in REGISTRY {
                let kind = if s.randomized { "random" } else { "gallery" };
                println!("{:<22} {:<7} {:<30} {}", s.name, kind, s.theorem, s.description);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            scenario,
            config,
            depth,
            dim,
            seed,
            trials,
            tolerance,
            out,
            format,
            timings,
        } => {
            let mut cfg = match &config {
                Some(path) => ScenarioConfig::from_file(path)?,
                None => ScenarioConfig::default(),
            };
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            if cfg.scenario.is_empty() {
                return Err(LabError::Config("no scenario given (use --scenario or a config file)".into()));
            }
            cfg.depth = depth.or(cfg.depth);
            cfg.dim = dim.or(cfg.dim);
            cfg.seed = seed.or(cfg.seed);
            cfg.trials = trials.or(cfg.trials);
            cfg.tolerance = tolerance.or(cfg.tolerance);
            cfg.out = out.or(cfg.out);
            cfg.format = format.or(cfg.format);
            cfg.timings |= timings;
            let format = cfg.format.unwrap_or_default();
            let verdict = run_experiment(&cfg)?;
            print_verdict(&verdict);
            let path = cfg.output_path(&format!("{}.{}", verdict.scenario, extension(format)));
            emit_report(std::slice::from_ref(&verdict), format, &path)?;
            println!("report written to {}", path.display());
            Ok(exit_for(&[verdict]))
        }
        Command::Suite { out, format, timings } => {
            let verdicts = run_suite(timings)?;
            for v in &verdicts {
                print_verdict(v);
            }
            let cfg = ScenarioConfig {
                out,
                ..ScenarioConfig::default()
            };
            let path = cfg.output_path(&format!("suite.{}", extension(format)));
            emit_report(&verdicts, format, &path)?;
            println!("report written to {}", path.display());
            Ok(exit_for(&verdicts))
        }
        Command::Hypotheses { scenario } => {
            let info = lookup(&scenario)?;
            let verdict = run_experiment(&ScenarioConfig::named(info.name))?;
            for c in &verdict.hypotheses.conditions {
                let witness = c.witness.as_deref().unwrap_or("");
                println!("{:<24} {:<9} {witness}", c.kind.name(), c.status.tag());
            }
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
            if matches!(e, LabError::UnknownScenario(_) | LabError::Config(_)) {
                print_registry();
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
