mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::{Command, RunConfig, UsageError};
use nuhyp::ErrorKind;

#[derive(Parser)]
#[command(name = "nuhyp", version, about = "Resonance blocks, invariant manifolds, shadowing, horseshoes and spectra for torus maps")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exponents, resonance sequences and block densities along one orbit
    Analyze {
        #[command(flatten)]
        common: Common,
        /// also run the tempered level-function audit
        #[arg(long)]
        tempered: bool,
    },
    /// Local stable and unstable disks at a block point
    Manifold {
        #[command(flatten)]
        common: Common,
        /// orbit index of the block point (default: a third into H_t)
        #[arg(long)]
        index: Option<String>,
    },
    /// Shadow a pseudo-orbit read from a file
    Shadow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<String>,
        /// both, constructive or newton
        #[arg(long)]
        solver: Option<String>,
    },
    /// Close a periodic pseudo-orbit to a periodic point
    Close {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        period: Option<String>,
        /// recurrence gap; 0 closes from the start point itself
        #[arg(long)]
        gap: Option<String>,
    },
    /// Build and audit a horseshoe for the map's natural measure
    Horseshoe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alphabet_trim: Option<String>,
        #[arg(long)]
        support_size: Option<String>,
        #[arg(long)]
        measure_steps: Option<String>,
        #[arg(long)]
        candidates: Option<String>,
    },
    /// Match the Lyapunov spectrum with a periodic orbit
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// orbit steps the recurrence search may use
        #[arg(long)]
        budget: Option<String>,
    },
    /// Smallest power N of the map whose H_1 density reaches theta
    SelectPower {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        theta: Option<String>,
        /// comma-separated candidate powers
        #[arg(long)]
        powers: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// key = value file; flags given on the command line override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// cat, identity, perturbed-cat:delta=D or file:PATH
    #[arg(long)]
    system: Option<String>,
    /// margin epsilon, or `auto`
    #[arg(long)]
    eps: Option<String>,
    /// comma-separated level grid
    #[arg(long)]
    levels: Option<String>,
    /// orbit length (return time for horseshoe)
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// start point `x,y`; drawn from the seed when absent
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// block level
    #[arg(long)]
    t: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    /// output directory
    #[arg(long)]
    out: Option<String>,
}

impl Common {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("system", &self.system),
            ("eps", &self.eps),
            ("levels", &self.levels),
            ("n", &self.n),
            ("window", &self.window),
            ("seed", &self.seed),
            ("x0", &self.x0),
            ("t", &self.t),
            ("samples", &self.samples),
            ("out", &self.out),
        ]
    }
}

fn build(cmd: &Cmd) -> Result<RunConfig, UsageError> {
    let (command, common, mut extra): (Command, &Common, Vec<(&str, Option<String>)>) = match cmd {
        Cmd::Analyze { common, tempered } => (
            Command::Analyze,
            common,
            vec![("tempered", tempered.then(|| "true".to_string()))],
        ),
        Cmd::Manifold { common, index } => (Command::Manifold, common, vec![("index", index.clone())]),
        Cmd::Shadow { common, input, solver } => (
            Command::Shadow,
            common,
            vec![("input", input.clone()), ("solver", solver.clone())],
        ),
        Cmd::Close { common, input, period, gap } => (
            Command::Close,
            common,
            vec![("input", input.clone()), ("period", period.clone()), ("gap", gap.clone())],
        ),
        Cmd::Horseshoe {
            common,
            alphabet_trim,
            support_size,
            measure_steps,
            candidates,
        } => (
            Command::Horseshoe,
            common,
            vec![
                ("alphabet_trim", alphabet_trim.clone()),
                ("support_size", support_size.clone()),
                ("measure_steps", measure_steps.clone()),
                ("candidates", candidates.clone()),
            ],
        ),
        Cmd::Spectrum { common, budget } => (Command::Spectrum, common, vec![("budget", budget.clone())]),
        Cmd::SelectPower { common, theta, powers } => (
            Command::SelectPower,
            common,
            vec![("theta", theta.clone()), ("powers", powers.clone())],
        ),
    };
    let mut cfg = RunConfig::defaults(command);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    extra.extend(common.pairs().into_iter().map(|(k, v)| (k, v.clone())));
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.finish()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build(&cli.command)
        .map_err(CliError::Usage)
        .and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(e)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Precondition => 3,
                ErrorKind::Solver => 4,
                ErrorKind::Verification => 5,
            })
        }
    }
}
