//! Comparison of the four approaches, metrics table and run directories.

use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::closed_loop::{run_closed_loop, Controller, RunLog};
use super::config::{Approach, RunConfig, Scenario};
use super::offline::{generate_offline_dataset, OfflineResult};
use super::steptests::{run_step_tests, InitialModels};

/// Minimum, quartiles and maximum (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(FiveNumber {
            min: v[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub approach: String,
    pub label: String,
    pub status: String,
    pub phi_end: Option<f64>,
    pub phi_slope_final_quarter: Option<f64>,
    pub opt_min: Option<f64>,
    pub opt_q25: Option<f64>,
    pub opt_median: Option<f64>,
    pub opt_q75: Option<f64>,
    pub opt_max: Option<f64>,
    pub train_min: Option<f64>,
    pub train_q25: Option<f64>,
    pub train_median: Option<f64>,
    pub train_q75: Option<f64>,
    pub train_max: Option<f64>,
    pub steps: usize,
    /// Steps whose optimization plus training time exceeded the sampling time.
    pub over_budget_steps: usize,
    pub fallback_steps: usize,
}

impl MetricsRow {
    pub fn from_run(approach: Approach, run: &Result<RunLog>, sampling_time: f64) -> Self {
        let mut row = MetricsRow {
            approach: approach.roman().into(),
            label: approach.label().into(),
            status: "ok".into(),
            phi_end: None,
            phi_slope_final_quarter: None,
            opt_min: None,
            opt_q25: None,
            opt_median: None,
            opt_q75: None,
            opt_max: None,
            train_min: None,
            train_q25: None,
            train_median: None,
            train_q75: None,
            train_max: None,
            steps: 0,
            over_budget_steps: 0,
            fallback_steps: 0,
        };
        let log = match run {
            Ok(log) => log,
            Err(e) => {
                row.status = format!("failed: {e}");
                return row;
            }
        };
        row.phi_end = Some(log.final_phi());
        row.phi_slope_final_quarter = Some(log.final_quarter_slope());
        if let Some(f) = FiveNumber::of(&log.optimization_times()) {
            (row.opt_min, row.opt_q25, row.opt_median, row.opt_q75, row.opt_max) =
                (Some(f.min), Some(f.q25), Some(f.median), Some(f.q75), Some(f.max));
        }
        if approach == Approach::Adaptive {
            if let Some(f) = FiveNumber::of(&log.training_times()) {
                (row.train_min, row.train_q25, row.train_median, row.train_q75, row.train_max) =
                    (Some(f.min), Some(f.q25), Some(f.median), Some(f.q75), Some(f.max));
            }
        }
        row.steps = log.steps.len();
        row.over_budget_steps = log
            .steps
            .iter()
            .filter(|s| s.opt_time_s + s.train_time_s > sampling_time)
            .count();
        row.fallback_steps = log.steps.iter().filter(|s| s.fallback).count();
        row
    }

    pub fn optimization_summary(&self) -> Option<FiveNumber> {
        Some(FiveNumber {
            min: self.opt_min?,
            q25: self.opt_q25?,
            median: self.opt_median?,
            q75: self.opt_q75?,
            max: self.opt_max?,
        })
    }
}

pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Renders the metrics as a fixed-width table.
pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let num = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$e}"));
    let mut s = format!(
        "{:<4} {:<16} {:>11} {:>11} {:>43} {:>43} {:>6} {:>6}\n",
        "", "approach", "phi_end", "slope_q4", "opt time min/q25/med/q75/max (s)", "train time min/q25/med/q75/max (s)", "over", "fallb"
    );
    for r in rows {
        let five = |a: [Option<f64>; 5]| a.iter().map(|v| v.map_or("-".into(), |x| format!("{x:.2}"))).collect::<Vec<_>>().join("/");
        s.push_str(&format!(
            "{:<4} {:<16} {:>11} {:>11} {:>43} {:>43} {:>6} {:>6}",
            r.approach,
            r.label,
            num(r.phi_end, 3),
            num(r.phi_slope_final_quarter, 3),
            five([r.opt_min, r.opt_q25, r.opt_median, r.opt_q75, r.opt_max]),
            five([r.train_min, r.train_q25, r.train_median, r.train_q75, r.train_max]),
            r.over_budget_steps,
            r.fallback_steps
        ));
        if r.status != "ok" {
            s.push_str(&format!("  [{}]", r.status));
        }
        s.push('\n');
    }
    s
}

/// Everything a comparison produced.
#[derive(Debug)]
pub struct Comparison {
    pub seed: u64,
    pub initial: Option<InitialModels>,
    pub offline: Option<OfflineResult>,
    pub runs: Vec<(Approach, Result<RunLog>)>,
}

impl Comparison {
    pub fn run(&self, a: Approach) -> Option<&RunLog> {
        self.runs.iter().find(|(b, _)| *b == a).and_then(|(_, r)| r.as_ref().ok())
    }

    pub fn metrics(&self, sampling_time: f64) -> Vec<MetricsRow> {
        self.runs
            .iter()
            .map(|(a, r)| MetricsRow::from_run(*a, r, sampling_time))
            .collect()
    }
}

/// Runs the selected approaches on one scenario. Step tests and offline
/// training are done here unless supplied; a failing approach is recorded
/// and the others still run.
pub fn run_approaches(
    scenario: &Scenario,
    cfg: &RunConfig,
    seed: u64,
    approaches: &[Approach],
    initial: Option<InitialModels>,
    offline: Option<OfflineResult>,
) -> Result<Comparison> {
    let needs_initial = approaches.iter().any(|a| matches!(a, Approach::Adaptive | Approach::InitialOnly));
    let needs_offline = approaches.contains(&Approach::OfflineTrained);
    let initial = match initial {
        Some(i) => Some(i),
        None if needs_initial => {
            info!("running step tests");
            Some(run_step_tests(cfg, seed)?)
        }
        None => None,
    };
    let offline = match offline {
        Some(o) => Some(o),
        None if needs_offline => {
            info!("training offline surrogates");
            Some(generate_offline_dataset(cfg, seed)?)
        }
        None => None,
    };
    let mut runs = Vec::with_capacity(approaches.len());
    for &a in approaches {
        let controller = match a {
            Approach::Ideal => Controller::Ideal,
            Approach::InitialOnly => Controller::Fixed(initial.as_ref().expect("prepared").models.clone()),
            Approach::OfflineTrained => Controller::Fixed(offline.as_ref().expect("prepared").models.clone()),
            Approach::Adaptive => {
                let i = initial.as_ref().expect("prepared");
                Controller::Adaptive {
                    models: i.models.clone(),
                    stores: i.data.stores.clone(),
                }
            }
        };
        info!("closed loop: {a}");
        let r = run_closed_loop(scenario, cfg, a, controller, seed);
        match &r {
            Ok(log) => info!("{a}: phi_end = {:.4e}", log.final_phi()),
            Err(e) => warn!("{a} failed: {e}"),
        }
        runs.push((a, r));
    }
    Ok(Comparison { seed, initial, offline, runs })
}

/// All four approaches on the same seeded scenario.
pub fn run_comparison(scenario: &Scenario, cfg: &RunConfig, seed: u64) -> Result<Comparison> {
    run_approaches(scenario, cfg, seed, &Approach::ALL, None, None)
}

/// Writes config and scenario snapshots, seed, logs, metrics and models under `dir`.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, scenario: &Scenario, cmp: &Comparison) -> Result<()> {
    let res = cfg.resolve()?;
    fs::create_dir_all(dir.join("models"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    fs::write(dir.join("scenario.toml"), scenario.to_toml_string()?)?;
    fs::write(dir.join("seed.txt"), format!("{}\n", cmp.seed))?;
    if let Some(i) = &cmp.initial {
        write_models(&dir.join("models"), "initial", &i.models)?;
        write_stores(dir, "steptest", &i.data.stores)?;
    }
    if let Some(o) = &cmp.offline {
        write_models(&dir.join("models"), "offline", &o.models)?;
    }
    for (a, r) in &cmp.runs {
        let Ok(log) = r else { continue };
        let label = a.label();
        log.write_steps_csv(&res.layout.agg_stages, fs::File::create(dir.join(format!("steps_{label}.csv")))?)?;
        log.write_products_csv(fs::File::create(dir.join(format!("products_{label}.csv")))?)?;
        if *a == Approach::Adaptive {
            log.write_training_csv(fs::File::create(dir.join("training_adaptive.csv"))?)?;
            write_models(&dir.join("models"), "adaptive_final", &log.models)?;
            write_stores(dir, "adaptive", &log.stores)?;
        }
    }
    write_metrics_csv(&cmp.metrics(res.ocp.t_s), fs::File::create(dir.join("metrics.csv"))?)?;
    Ok(())
}

pub fn write_models(dir: &Path, prefix: &str, models: &[crate::surrogate::SurrogateModel]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, m) in models.iter().enumerate() {
        fs::write(dir.join(format!("{prefix}_section{}.txt", k + 1)), m.serialize())?;
    }
    Ok(())
}

pub fn write_stores(dir: &Path, prefix: &str, stores: &[crate::learner::DataStore]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in stores {
        s.write_csv(fs::File::create(dir.join(format!("{prefix}_store_section{}.csv", s.section_id)))?)?;
    }
    Ok(())
}
