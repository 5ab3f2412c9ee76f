use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use hycol_core::harness::config::{Approach, RunConfig, Scenario};
use hycol_core::harness::offline::generate_offline_dataset;
use hycol_core::harness::report::{
    format_metrics, read_metrics_csv, run_approaches, write_models, write_run_dir, write_stores,
};
use hycol_core::harness::steptests::run_step_tests;

#[derive(Parser)]
#[command(name = "hycol", version, about = "Adaptive hybrid-model NMPC of a binary distillation column")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or all controllers on a disturbance scenario.
    Simulate {
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario (TOML); the default feed-step scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// i (adaptive), ii (initial-only), iii (offline-trained), iv (ideal) or all.
        #[arg(long, default_value = "all")]
        approach: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Open-loop step tests and initial surrogate training.
    Steptests {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Dense oracle data set and offline-trained surrogates.
    OfflineTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Print the metrics table of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn parse_approaches(s: &str) -> Result<Vec<Approach>> {
    if s == "all" {
        return Ok(Approach::ALL.to_vec());
    }
    s.split(',').map(|a| a.trim().parse::<Approach>().map_err(Into::into)).collect()
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, scenario, approach, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let mut sc = match &scenario {
                Some(p) => Scenario::load(p).with_context(|| format!("loading scenario {}", p.display()))?,
                None => Scenario::default(),
            };
            if let Some(s) = seed {
                sc.seed = s;
            }
            let approaches = parse_approaches(&approach)?;
            let cmp = run_approaches(&sc, &cfg, sc.seed, &approaches, None, None)?;
            write_run_dir(&out, &cfg, &sc, &cmp)?;
            let rows = cmp.metrics(cfg.resolve()?.ocp.t_s);
            print!("{}", format_metrics(&rows));
            info!("run written to {}", out.display());
            if rows.iter().all(|r| r.status != "ok") {
                bail!("every approach failed");
            }
        }
        Command::Steptests { config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let init = run_step_tests(&cfg, seed)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            fs::write(out.join("seed.txt"), format!("{seed}\n"))?;
            write_stores(&out, "steptest", &init.data.stores)?;
            write_models(&out.join("models"), "initial", &init.models)?;
            let c = &init.data.counts;
            println!(
                "{} trajectories x {} samples, warm-up {} each: {} reconstructions per section",
                c.trajectories,
                c.samples_per_trajectory,
                c.warmup_per_trajectory,
                c.reconstructed()
            );
            println!("section  discarded  below-floor  stored  hidden  train-mse  goal");
            for k in 0..c.stored.len() {
                let rep = &init.reports[k];
                println!(
                    "{:>7}  {:>9}  {:>11}  {:>6}  {:>6}  {:>9.3e}  {}",
                    k + 1,
                    c.discarded[k],
                    c.below_floor[k],
                    c.stored[k],
                    init.models[k].hidden_count(),
                    rep.final_mse,
                    rep.goal_met
                );
            }
        }
        Command::OfflineTrain { config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let off = generate_offline_dataset(&cfg, seed)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            fs::write(out.join("seed.txt"), format!("{seed}\n"))?;
            write_stores(&out, "offline", &off.stores)?;
            write_models(&out.join("models"), "offline", &off.models)?;
            println!("section  points  skipped  hidden  train-mse  held-out-mse  time(s)");
            for k in 0..off.models.len() {
                println!(
                    "{:>7}  {:>6}  {:>7}  {:>6}  {:>9.3e}  {:>12.3e}  {:>7.1}",
                    k + 1,
                    off.stores[k].len(),
                    off.skipped[k],
                    off.models[k].hidden_count(),
                    off.reports[k].final_mse,
                    off.held_out_mse[k],
                    off.reports[k].wall_time_s
                );
            }
        }
        Command::Report { run } => {
            let path = run.join("metrics.csv");
            let rows = read_metrics_csv(fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?)?;
            print!("{}", format_metrics(&rows));
        }
    }
    Ok(())
}
