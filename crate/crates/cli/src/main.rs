use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rtcd_cli::{run, Command, Invocation};

#[derive(Parser)]
#[command(
    name = "rtcd",
    version,
    about = "Robust trajectory, controller and design co-optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also verify the estimated funnel (funnel command).
    #[arg(long, global = true)]
    verify: bool,
    /// Nominal trajectory CSV to use instead of solving.
    #[arg(long, global = true)]
    trajectory: Option<PathBuf>,
    /// Gain schedule JSON to use instead of solving.
    #[arg(long, global = true)]
    schedule: Option<PathBuf>,
    /// Funnel JSON to verify.
    #[arg(long, global = true)]
    funnel: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Solve the swing-up trajectory.
    Trajopt,
    /// Compute the time-varying LQR gain schedule.
    Tvlqr,
    /// Estimate the region-of-attraction funnel.
    Funnel,
    /// Verify a funnel with independent interior samples.
    Verify,
    /// Optimize trajectory and controller cost weights.
    Rtc,
    /// Optimize design parameters around RTC.
    Rtcd,
    /// Run the CMA-ES benchmark functions.
    BenchCmaes,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Trajopt => Command::Trajopt,
        Cmd::Tvlqr => Command::Tvlqr,
        Cmd::Funnel => Command::Funnel,
        Cmd::Verify => Command::Verify,
        Cmd::Rtc => Command::Rtc,
        Cmd::Rtcd => Command::Rtcd,
        Cmd::BenchCmaes => Command::BenchCmaes,
    };
    let inv = Invocation {
        config: cli.config,
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out,
        verify: cli.verify,
        trajectory: cli.trajectory,
        schedule: cli.schedule,
        funnel: cli.funnel,
        ..Invocation::new(command)
    };
    match run(&inv) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
