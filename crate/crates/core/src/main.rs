use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use pathdens::scenario;
use pathdens::Error;

const AFTER_HELP: &str = "\
Outputs (written to --out; every CSV starts with `# scenario_hash=<sha256> seed=<seed>`):
  simulate      path.csv        t, x1..xn, jac1..jacn   (state and Pi_n Y_t L_0 v)
  malliavin     derivatives.csv r, weight, d<i>_<k>     (D_r X(tau) on the sub-grid)
                tail.csv        epsilon, probability    (with options.samples)
  hormander     depths.csv      depth, lambda_min
  master-check  refinement.csv  steps, seed, residual_sup
  rough-check   refinement.csv  steps, seed, residual_sup
  delay-lift    lifted.csv      t, block<k>_x<i>
  density       kde.csv         x1..xn, density
                charfn.csv      axis, frequency, modulus
Each command also writes summary.json.

Exit status: 0 success, 1 i/o failure, 2 invalid scenario or arguments,
3 numerical failure.";

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Simulate,
    Malliavin,
    Hormander,
    MasterCheck,
    RoughCheck,
    DelayLift,
    Density,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Malliavin => "malliavin",
            Command::Hormander => "hormander",
            Command::MasterCheck => "master-check",
            Command::RoughCheck => "rough-check",
            Command::DelayLift => "delay-lift",
            Command::Density => "density",
        }
    }
}

/// Path-dependent SDE laboratory.
#[derive(Parser, Debug)]
#[command(name = "pathdens", version, after_help = AFTER_HELP)]
struct Cli {
    command: Command,
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "PATHDENS_WORKERS")]
    workers: Option<usize>,
    /// Number of mesh halvings for master-check and rough-check.
    #[arg(long, default_value_t = 3)]
    mesh_doubling: usize,
}

fn run(cli: &Cli) -> Result<String, Error> {
    let bytes = std::fs::read(&cli.scenario)?;
    let loaded = scenario::load(&bytes)?;
    let out = scenario::run(cli.command.name(), &loaded, cli.mesh_doubling)?;
    scenario::write_artifacts(&cli.out, &out.artifacts)?;
    Ok(out.summary_line)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.workers {
        if k == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
