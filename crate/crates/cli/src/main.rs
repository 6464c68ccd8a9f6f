mod commands;
mod config;
mod model;
mod output;

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{DiagnoseAction, EstimateAction, GraphAction, InterlaceAction, PercoAction, PotentialAction, RenormAction};
use crate::config::JobConfig;
use crate::output::Run;

/// A failed run: exit code 2 for bad input, 3 for numerical or geometry failures.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 2, message: msg.into() }
    }

    pub fn geometry(msg: impl Into<String>) -> Self {
        Failure { code: 3, message: msg.into() }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Failure { code: 3, message: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure { code: 3, message: format!("{}: {e}", path.display()) }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<gxz::Error> for Failure {
    fn from(e: gxz::Error) -> Self {
        Failure { code: if e.is_usage() { 2 } else { 3 }, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "gxz", version, about = "Random interlacements and vacant-set percolation on G x Z")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build or describe a graph window.
    Graph {
        #[arg(value_enum)]
        action: GraphAction,
        #[command(flatten)]
        job: JobConfig,
    },
    /// Killed Green functions, capacities, hitting probabilities.
    Potential {
        #[arg(value_enum)]
        action: PotentialAction,
        #[command(flatten)]
        job: JobConfig,
    },
    /// Sample interlacements and check their laws.
    Interlace {
        #[arg(value_enum)]
        action: InterlaceAction,
        #[command(flatten)]
        job: JobConfig,
    },
    /// Crossing and cluster-tail probabilities of the vacant set.
    Perco {
        #[arg(value_enum)]
        action: PercoAction,
        #[command(flatten)]
        job: JobConfig,
    },
    /// Covers, tree embeddings and decoupling checks.
    Renorm {
        #[arg(value_enum)]
        action: RenormAction,
        #[command(flatten)]
        job: JobConfig,
    },
    /// Scans, critical-level proxies and decay fits.
    Estimate {
        #[arg(value_enum)]
        action: EstimateAction,
        #[command(flatten)]
        job: JobConfig,
    },
    /// Walk diagnostics.
    Diagnose {
        #[arg(value_enum)]
        action: DiagnoseAction,
        #[command(flatten)]
        job: JobConfig,
    },
}

impl Cmd {
    fn parts(&self) -> (String, &JobConfig) {
        use clap::ValueEnum;
        fn name<A: ValueEnum>(a: &A) -> String {
            a.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
        }
        match self {
            Cmd::Graph { action, job } => (format!("graph {}", name(action)), job),
            Cmd::Potential { action, job } => (format!("potential {}", name(action)), job),
            Cmd::Interlace { action, job } => (format!("interlace {}", name(action)), job),
            Cmd::Perco { action, job } => (format!("perco {}", name(action)), job),
            Cmd::Renorm { action, job } => (format!("renorm {}", name(action)), job),
            Cmd::Estimate { action, job } => (format!("estimate {}", name(action)), job),
            Cmd::Diagnose { action, job } => (format!("diagnose {}", name(action)), job),
        }
    }

    fn execute(&self, cfg: &JobConfig, run: &mut Run) -> Result<(), Failure> {
        match self {
            Cmd::Graph { action, .. } => commands::graph(*action, cfg, run),
            Cmd::Potential { action, .. } => commands::potential(*action, cfg, run),
            Cmd::Interlace { action, .. } => commands::interlace(*action, cfg, run),
            Cmd::Perco { action, .. } => commands::perco(*action, cfg, run),
            Cmd::Renorm { action, .. } => commands::renorm(*action, cfg, run),
            Cmd::Estimate { action, .. } => commands::estimate(*action, cfg, run),
            Cmd::Diagnose { action, .. } => commands::diagnose(*action, cfg, run),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (command, flags) = cli.cmd.parts();
    let (cfg, result) = match JobConfig::resolve(flags) {
        Ok(cfg) => {
            let r = pool(cfg.workers);
            (cfg, r)
        }
        Err(e) => (flags.clone(), Err(e)),
    };
    let mut run = Run::new(&cfg.out_dir(), command);
    let result = result.and_then(|_| cli.cmd.execute(&cfg, &mut run));
    let err = result.err();
    if let Err(e) = run.finish(&cfg, err.as_ref()) {
        eprintln!("gxz: cannot write manifest in {}: {e}", run.dir().display());
        if err.is_none() {
            return ExitCode::from(3);
        }
    }
    match err {
        None => {
            eprintln!("gxz: wrote {}", run.dir().display());
            ExitCode::SUCCESS
        }
        Some(f) => {
            eprintln!("gxz: error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn pool(workers: Option<usize>) -> Result<(), Failure> {
    let Some(n) = workers else { return Ok(()) };
    if n == 0 {
        return Err(Failure::usage("--workers must be positive"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::numerical(format!("worker pool: {e}")))
}
