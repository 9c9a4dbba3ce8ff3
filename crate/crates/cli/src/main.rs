use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magflow_cli::{bundled, load, run_scenario, RunOptions, Scenario, EXIT_INVALID};

#[derive(Parser)]
#[command(name = "magflow", version, about = "Run magnetic-flow scenarios and write JSON/CSV reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario, given as a path or the name of a bundled scenario.
    Run {
        path: String,
        #[command(flatten)]
        flags: Flags,
    },
    /// List the bundled scenarios.
    List,
    /// Run every bundled scenario; the exit code is the worst one.
    RunAll {
        #[command(flatten)]
        flags: Flags,
    },
    /// Print a bundled scenario's JSON.
    Show { name: String },
}

#[derive(Args)]
struct Flags {
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplies every tolerance.
    #[arg(long, default_value_t = 1.0)]
    tol_scale: f64,
    /// Also write the orbit, curvature and scaling tables.
    #[arg(long)]
    dump_intermediate: bool,
}

impl Flags {
    fn options(&self) -> RunOptions {
        RunOptions { seed: self.seed, tol_scale: self.tol_scale, dump_intermediate: self.dump_intermediate }
    }
}

fn execute(sc: &Scenario, flags: &Flags) -> i32 {
    let outcome = match run_scenario(sc, &flags.options()) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{}: {e}", sc.name);
            return e.exit_code();
        }
    };
    if let Err(e) = outcome.write(sc, &flags.out) {
        eprintln!("{e}");
        return e.exit_code();
    }
    let r = &outcome.report;
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    match (&r.error, failed.is_empty()) {
        (Some(e), _) => eprintln!("{}: numerical failure: {e}", r.scenario),
        (None, false) => eprintln!("{}: failed checks: {}", r.scenario, failed.join(", ")),
        (None, true) => println!("{}: ok ({} checks)", r.scenario, r.checks.len()),
    }
    outcome.exit_code()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { path, flags } => match load(&path) {
            Ok(sc) => execute(&sc, &flags),
            Err(e) => {
                eprintln!("{e}");
                e.exit_code()
            }
        },
        Command::List => {
            for b in bundled() {
                println!("{:<24} {}", b.name, b.description());
            }
            0
        }
        Command::RunAll { flags } => bundled().iter().map(|b| execute(&b.scenario(), &flags)).max().unwrap_or(0),
        Command::Show { name } => match bundled().into_iter().find(|b| b.name == name) {
            Some(b) => {
                print!("{}", b.source);
                0
            }
            None => {
                eprintln!("no bundled scenario named `{name}`");
                EXIT_INVALID
            }
        },
    };
    ExitCode::from(code as u8)
}
