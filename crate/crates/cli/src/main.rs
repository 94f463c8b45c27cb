use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use airway_nav::harness::{parse_grid, run, sweep, Algorithm, RunConfig, SweepParam};
use airway_nav::skeleton::{synth_lung, SynthParams};

mod server;

#[derive(Parser)]
#[command(name = "airway-nav", version, about = "Bronchoscope localization on airway skeletons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic airway skeleton.
    GenLung {
        #[arg(long, default_value_t = 5)]
        generations: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with branching parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate, localize and score the sequences of a run config.
    Run(RunArgs),
    /// Repeat a run over a grid of values for one filter parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// sigma_ins, sigma_fit, sigma_roll, sigma_x_scale or gen_weights.
        #[arg(long)]
        sweep_param: String,
        /// Comma-separated values.
        #[arg(long)]
        grid: String,
        /// CSV path; defaults to `<out-dir>/sweep_<param>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve interactive sessions over WebSocket (`/ws`) and HTTP (`/session`).
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = airway_nav::harness::session::DEFAULT_MAX_SESSIONS)]
        max_sessions: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(algo) = &self.algo {
            cfg.algorithm = algo.parse::<Algorithm>()?;
        }
        let out_dir = self
            .out_dir
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out_dir))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenLung {
            generations,
            seed,
            params,
            out,
        } => {
            let params: SynthParams = match params {
                Some(p) => serde_json::from_str(
                    &std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )
                .with_context(|| format!("parsing {}", p.display()))?,
                None => SynthParams::default(),
            };
            let skel = synth_lung(generations, seed, &params)?;
            skel.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            log::info!(
                "wrote {} ({} airways, {} bifurcations)",
                out.display(),
                skel.len(),
                skel.bifurcations().len()
            );
        }
        Command::Run(args) => {
            let (cfg, out_dir) = args.load()?;
            let skel = cfg.skeleton.load()?;
            let out = run(&cfg, &skel)?;
            out.write(&out_dir)
                .with_context(|| format!("writing outputs to {}", out_dir.display()))?;
            let row = out.metrics_row();
            println!("{}", serde_json::to_string(&row)?);
            log::info!("wrote {}", out_dir.display());
        }
        Command::Sweep {
            run: args,
            sweep_param,
            grid,
            out,
        } => {
            let (cfg, out_dir) = args.load()?;
            let param: SweepParam = sweep_param.parse()?;
            let grid = parse_grid(&grid)?;
            let skel = cfg.skeleton.load()?;
            let rows = sweep(&cfg, &skel, param, &grid)?;
            let path = match out {
                Some(p) => p,
                None => {
                    std::fs::create_dir_all(&out_dir)?;
                    out_dir.join(format!("sweep_{}.csv", param.name()))
                }
            };
            airway_nav::harness::sweep::write_sweep(&path, &rows)?;
            for r in &rows {
                println!("{},{}", r.value, r.mean_f1.map(|f| f.to_string()).unwrap_or_default());
            }
            log::info!("wrote {}", path.display());
        }
        Command::Serve {
            port,
            host,
            max_sessions,
        } => {
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(&host, port, max_sessions))?;
        }
    }
    Ok(())
}
