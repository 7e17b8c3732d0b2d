use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dualpair::config::RunConfig;
use dualpair::pipeline::Mode;
use dualpair::report::{text_summary, write_report};
use dualpair::suite::{Command, Suite};

#[derive(Parser, Debug)]
#[command(
    name = "dualpair",
    version,
    about = "Dual-pair measure and level-set decomposition checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true, env = "DUALPAIR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "DUALPAIR_MODE")]
    mode: Option<ModeArg>,
    /// Report directory.
    #[arg(long, global = true, env = "DUALPAIR_OUT")]
    out: Option<PathBuf>,
    /// Monte Carlo seed.
    #[arg(long, global = true, env = "DUALPAIR_SEED")]
    seed: Option<u64>,
    /// Cells per axis.
    #[arg(long, global = true, env = "DUALPAIR_GRID")]
    grid: Option<usize>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, env = "DUALPAIR_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Derived exponents and parameter gates.
    Exponents,
    /// Doubling, scale law and Monte Carlo checks of the pair measure.
    Measure,
    /// Energy identity, seminorms and Poincare-type inequalities.
    Energy,
    /// Decomposition trace with structural audits.
    Decompose,
    /// Dimensional constants, off-diagonal reverse Holder and every sum check.
    Verify,
    /// Everything above.
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Theorem,
    Diagnostic,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Exponents => Command::Exponents,
            Cmd::Measure => Command::Measure,
            Cmd::Energy => Command::Energy,
            Cmd::Decompose => Command::Decompose,
            Cmd::Verify => Command::Verify,
            Cmd::All => Command::All,
        }
    }
}

fn load(cli: &Cli) -> dualpair::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = cli.mode {
        cfg.execution.mode = match m {
            ModeArg::Theorem => Mode::Theorem,
            ModeArg::Diagnostic => Mode::Diagnostic,
        };
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.display().to_string();
    }
    if let Some(s) = cli.seed {
        cfg.execution.seed = s;
    }
    if let Some(g) = cli.grid {
        cfg.geometry.grid = g;
    }
    if let Some(t) = cli.threads {
        cfg.execution.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> dualpair::Result<i32> {
    let cfg = load(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.execution.threads)
        .build_global()
        .map_err(|e| dualpair::Error::Io(e.to_string()))?;
    let dir = PathBuf::from(&cfg.output.dir);
    let formats = cfg.output.formats.clone();
    let suite = Suite::new(cfg)?;
    let report = suite.run(cli.command.into())?;
    let files = write_report(&report, &dir, &formats)?;
    print!("{}", text_summary(&report));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(report.summary.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
