use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossdiff_cli::{execute, load_config, ConfigError, Report, Scenario};

#[derive(Parser)]
#[command(name = "crossdiff", version, about = "Cross-diffusion scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time-dependent run: local, nonlocal-torus, general-domain or kolmogorov.
    Run(Common),
    /// Nonlocal-to-local convergence study.
    Study(Common),
    /// Entropy-structure certificate on a sample grid.
    Certify(Common),
    /// Particle simulations against the mean-field system.
    Particle(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

fn allowed(command: &str) -> &'static [Scenario] {
    match command {
        "run" => &[Scenario::Local, Scenario::NonlocalTorus, Scenario::GeneralDomain, Scenario::Kolmogorov],
        "study" => &[Scenario::ConvergenceStudy],
        "certify" => &[Scenario::Certify],
        _ => &[Scenario::Particle],
    }
}

fn fail(report: Report) -> ExitCode {
    eprint!("{}", report.to_toml());
    ExitCode::from(report.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args, default) = match cli.command {
        Command::Run(a) => ("run", a, Scenario::NonlocalTorus),
        Command::Study(a) => ("study", a, Scenario::ConvergenceStudy),
        Command::Certify(a) => ("certify", a, Scenario::Certify),
        Command::Particle(a) => ("particle", a, Scenario::Particle),
    };
    let mut cfg = match load_config(&args.config, Some(default)) {
        Ok(c) => c,
        Err(e @ ConfigError::Io { .. }) => return fail(Report::from_error("error", e.to_string())),
        Err(e) => return fail(Report::from_error("config-error", e.to_string())),
    };
    if !allowed(name).contains(&cfg.scenario()) {
        return fail(Report::from_error(
            "config-error",
            format!("scenario \"{}\" cannot be used with the {name} subcommand", cfg.scenario().name()),
        ));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.out_dir = Some(o);
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("crossdiff-out"));
    match execute(&cfg, name, &out) {
        Ok(report) => {
            if !args.quiet {
                for c in &report.check {
                    println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
                if let Some(e) = &report.error {
                    println!("error: {e}");
                }
                println!("status: {} (artifacts in {})", report.status, out.display());
            }
            if report.exit_code() != 0 {
                eprint!("{}", report.to_toml());
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => fail(Report::from_error("error", e.to_string())),
    }
}
