use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reachsteer::harness::{self, RunConfig};
use reachsteer::Error;

#[derive(Parser)]
#[command(name = "reachsteer", version, about = "Reachability-constrained steering of a toy diffusion sampler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; defaults to the first entry of `seeds` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Worker threads (1 gives bitwise-reproducible scheduling).
    #[arg(long)]
    threads: Option<usize>,
    /// Override a config value, e.g. `--set agent.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent (every configured seed unless --seed is given).
    Train(Common),
    /// Evaluate a checkpoint, or the unsteered sampler.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "zero_action")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the unmitigated sampler.
        #[arg(long)]
        zero_action: bool,
        /// Initializations per caption.
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// Train the constrained agent and the frozen-multiplier ablation.
    Ablate(Common),
    /// Compute the grid reachability oracle, optionally scoring a checkpoint.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit the latent action codec to the caption set.
    FitCodec(Common),
}

fn load_config(c: &Common) -> reachsteer::Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p, &c.overrides)?,
        None => {
            let text = RunConfig::default().to_toml_string()?;
            RunConfig::from_toml_str(&text, "<defaults>", &c.overrides)?
        }
    };
    Ok(cfg)
}

fn setup_threads(c: &Common) -> reachsteer::Result<()> {
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> reachsteer::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> reachsteer::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            setup_threads(&c)?;
            match c.seed {
                Some(seed) => print_json(&harness::cmd_train(&cfg, seed, &c.out)?),
                None if cfg.seeds.len() == 1 => print_json(&harness::cmd_train(&cfg, cfg.seeds[0], &c.out)?),
                None => {
                    let mut all = Vec::new();
                    for &seed in &cfg.seeds {
                        all.push(harness::cmd_train(&cfg, seed, &c.out.join(format!("seed-{seed}")))?);
                    }
                    print_json(&all)
                }
            }
        }
        Command::Eval {
            common,
            checkpoint,
            zero_action,
            n_seeds,
        } => {
            let cfg = load_config(&common)?;
            setup_threads(&common)?;
            if checkpoint.is_none() && !zero_action {
                return Err(Error::Config("eval needs --checkpoint or --zero-action".into()));
            }
            let ev = harness::cmd_eval(&cfg, checkpoint.as_deref(), n_seeds, &common.out)?;
            print_json(&ev.report)
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c)?;
            setup_threads(&c)?;
            let seed = c.seed.unwrap_or(cfg.seeds[0]);
            print_json(&harness::cmd_ablate(&cfg, seed, &c.out)?)
        }
        Command::Oracle { common, checkpoint } => {
            let cfg = load_config(&common)?;
            setup_threads(&common)?;
            print_json(&harness::cmd_oracle(&cfg, checkpoint.as_deref(), &common.out)?)
        }
        Command::FitCodec(c) => {
            let cfg = load_config(&c)?;
            print_json(&harness::cmd_fit_codec(&cfg, Path::new(&c.out))?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
