use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clusterplan::commands::{parse_fractions, run_command, Overrides};
use clusterplan::sched::SchedulingMode;

#[derive(Parser)]
#[command(name = "clusterplan", version, about = "GPU cluster scheduling simulator and TCO calculator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the workload; writes trace.csv and utilization.csv
    Simulate(Args),
    /// Cost table and break-even months; writes cost_table.csv and breakeven.json
    Cost(Args),
    /// Cumulative costs over a range of usage fractions; writes sweep.csv and sweep_band.csv
    Sweep(Args),
    /// Simulate, then price the measured usage
    Pipeline(Args),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Strict,
    Skip,
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    months: Option<u32>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated usage fractions for `sweep`
    #[arg(long)]
    fractions: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match cli.command {
        Command::Simulate(a) => ("simulate", a),
        Command::Cost(a) => ("cost", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Pipeline(a) => ("pipeline", a),
    };
    let fractions = match args.fractions.as_deref().map(parse_fractions).transpose() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let overrides = Overrides {
        months: args.months,
        mode: args.mode.map(|m| match m {
            Mode::Strict => SchedulingMode::Strict,
            Mode::Skip => SchedulingMode::Skip,
        }),
        seed: args.seed,
        out: args.out,
        fractions,
    };
    match run_command(name, &args.scenario, &overrides) {
        Ok(report) => {
            for path in &report.files {
                println!("wrote {}", path.display());
            }
            for (offering, month) in &report.break_even {
                match month {
                    Some(m) => println!("break-even vs {offering}: month {m}"),
                    None => println!("break-even vs {offering}: never within horizon"),
                }
            }
            if let Some(u) = &report.utilization {
                println!(
                    "grade of operation {:.1}% ({:.1} GPU-hours, {:.1} h/month)",
                    u.grade_of_operation * 100.0,
                    u.gpu_hours,
                    u.mean_monthly_usage_hours
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
