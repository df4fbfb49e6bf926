use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rloop_cli::commands::{cmd_analyze, cmd_generate, cmd_report, cmd_run};
use rloop_cli::config::{config_hash, load, to_toml};
use rloop_cli::{CliError, EXIT_COLLAPSE, EXIT_OK};
use rloop_core::experiment::ExperimentConfig;

#[derive(Parser)]
#[command(name = "rloop", version, about = "Iterative policy initialization experiments on modular arithmetic chains")]
struct Cli {
    /// Worker threads for sampling and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file; omitted keys take the reference values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed, overriding the file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let cfg = load(self.config.as_deref())?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration and its hash.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the problem set.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the loop (and the paired vanilla run) and write run directories.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run this many consecutive seeds starting at the master seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Problem file from `generate`; generated in memory when omitted.
        #[arg(long)]
        problems: Option<PathBuf>,
        #[arg(long, short, default_value = "runs")]
        out: PathBuf,
    },
    /// Write matrices, curves and pairwise comparisons for run directories.
    Analyze {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short, default_value = "analysis")]
        out: PathBuf,
    },
    /// Print run summaries and the paired comparison across seeds.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the cross-seed summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Config { cfg } => {
            let c = cfg.resolve()?;
            c.validate()?;
            println!("# config_hash = {}\n{}", config_hash(&c), to_toml(&c));
            Ok(EXIT_OK)
        }
        Command::Generate { cfg, out } => {
            let c = cfg.resolve()?;
            let g = cmd_generate(&c, &out)?;
            println!(
                "config {}: wrote {} (train {}, val_id {}, val_ood {})",
                g.config_hash,
                g.path.display(),
                g.counts.train,
                g.counts.val_id,
                g.counts.val_ood
            );
            Ok(EXIT_OK)
        }
        Command::Run { cfg, seeds, problems, out } => {
            let base = cfg.resolve()?;
            let mut code = EXIT_OK;
            for s in 0..seeds.max(1) {
                let c = base.clone().with_seed(base.master_seed() + s);
                let report = cmd_run(&c, &out, problems.as_deref())?;
                for r in &report.runs {
                    println!("{}: {}", r.dir.display(), serde_json::to_string(&r.manifest.status).unwrap_or_default());
                }
                let rc = report.exit_code();
                if rc == EXIT_COLLAPSE {
                    return Ok(rc);
                }
                code = code.max(rc);
            }
            Ok(code)
        }
        Command::Analyze { runs, out } => {
            for p in cmd_analyze(&runs, &out)? {
                println!("{}", p.display());
            }
            Ok(EXIT_OK)
        }
        Command::Report { runs, json } => {
            let r = cmd_report(&runs)?;
            print!("{}", r.text);
            if let (Some(path), Some(s)) = (json, &r.summary) {
                std::fs::write(path, serde_json::to_string_pretty(s).unwrap_or_default())?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(rloop_cli::EXIT_FAILURE as u8);
        }
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
