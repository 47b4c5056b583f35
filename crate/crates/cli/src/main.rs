use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mupar_cli::commands;
use mupar_cli::config::RunConfig;
use mupar_core::parametrize::Scheme;
use mupar_core::transfer::primer::BoundedFn;
use mupar_core::Error;

#[derive(Parser)]
#[command(
    name = "mupar",
    version,
    about = "Width-aware parametrizations, coordinate checks and HP transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a width ladder briefly and check that activations stay put.
    Coordcheck(Common),
    /// Grid or random HP search at one or more widths.
    Sweep(Common),
    /// Tune on the proxy, copy to the target, compare against controls.
    Transfer(Common),
    /// Train a fixed HP at several widths and check loss against width.
    Widthscan(Common),
    /// Replicate an unstable HP on a small model with a simulated width.
    Reverse(Common),
    /// Optimal scalar HP of the toy objective as n grows.
    Primer(PrimerArgs),
    /// Measure how entry sizes of random matrix products scale.
    Lawcheck(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory all outputs are written to.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Overrides the model scheme.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Overrides the training steps of every scale.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Clone)]
struct PrimerArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated values of n.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    f: Option<BoundedFn>,
    #[arg(long)]
    samples: Option<usize>,
}

/// Loads the config (or defaults when the subcommand allows it) and applies
/// flag and environment overrides.
fn resolve(
    name: &str,
    common: &Common,
    needs_file: bool,
) -> mupar_core::Result<(RunConfig, commands::Env)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None if needs_file => return Err(Error::Config(format!("{name} needs --config"))),
        None => RunConfig::parse("")?,
    };
    if let Some(kind) = &cfg.kind {
        if kind != name {
            return Err(Error::Config(format!(
                "config is for `{kind}`, not `{name}`"
            )));
        }
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if let Some(s) = common.scheme {
        cfg.scheme = Some(s);
    }
    if let Some(steps) = common.steps {
        for scale in [&mut cfg.scale, &mut cfg.target].into_iter().flatten() {
            scale.steps = steps;
        }
    }
    let env_workers = match std::env::var("MUPAR_WORKERS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            Error::Config(format!(
                "MUPAR_WORKERS must be a positive integer, got {v:?}"
            ))
        })?),
        Err(_) => None,
    };
    let workers = common
        .workers
        .or(env_workers)
        .or(cfg.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let output_dir = common
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((
        cfg,
        commands::Env {
            workers,
            output_dir,
        },
    ))
}

fn run(cli: Cli) -> mupar_core::Result<()> {
    let (name, common, needs_file) = match &cli.command {
        Command::Coordcheck(c) => ("coordcheck", c, true),
        Command::Sweep(c) => ("sweep", c, true),
        Command::Transfer(c) => ("transfer", c, true),
        Command::Widthscan(c) => ("widthscan", c, true),
        Command::Reverse(c) => ("reverse", c, true),
        Command::Primer(p) => ("primer", &p.common, false),
        Command::Lawcheck(c) => ("lawcheck", c, false),
    };
    let (mut cfg, env) = resolve(name, common, needs_file)?;
    if let Command::Primer(p) = &cli.command {
        if let Some(n) = &p.n {
            cfg.primer.n = n.clone();
        }
        if let Some(f) = p.f {
            cfg.primer.f = f;
        }
        if let Some(s) = p.samples {
            cfg.primer.samples = s;
        }
    }
    cfg.kind = Some(name.to_string());
    mupar_core::io::write_atomic(
        &env.output_dir.join("run_config.toml"),
        cfg.to_toml()?.as_bytes(),
    )?;
    match cli.command {
        Command::Coordcheck(_) => commands::coordcheck(&cfg, &env),
        Command::Sweep(_) => commands::sweep(&cfg, &env),
        Command::Transfer(_) => commands::transfer(&cfg, &env),
        Command::Widthscan(_) => commands::widthscan(&cfg, &env),
        Command::Reverse(_) => commands::reverse(&cfg, &env),
        Command::Primer(_) => commands::primer(&cfg, &env),
        Command::Lawcheck(_) => commands::lawcheck(&cfg, &env),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Json(_) => 2,
                Error::NoViableHp => 3,
                _ => 1,
            })
        }
    }
}
