//! Receding-horizon loop: measure, (adapt), estimate the feed, optimize,
//! apply the first move, advance the plant.

use std::io::Write;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::DVector;

use crate::column::operating_point_for_products;
use crate::error::{Error, Result};
use crate::learner::{adapt, DataPoint, DataStore, SectionUpdate};
use crate::lhs::derive_seed;
use crate::nmpc::{first_move, solve_ocp, warm_start_shift, ControlMoves, FullOrderModel, HybridModel, OcpSpec};
use crate::pipeline::{
    estimate_derivatives, estimate_feed_composition, reconstruct_training_points, DerivEstimate, Measurement,
};
use crate::surrogate::SurrogateModel;

use super::config::{Approach, RunConfig, Scenario};
use super::plant::{trapezoid, PiecewiseConstant, Plant, ProductSample};
use super::{measure, NoiseSource};

/// Controller-side model state for one approach.
#[derive(Debug, Clone)]
pub enum Controller {
    /// Full-order model with full state and true feed composition.
    Ideal,
    /// Hybrid model whose surrogates never change.
    Fixed(Vec<SurrogateModel>),
    /// Hybrid model retrained every period; stores hold all data seen so far.
    Adaptive {
        models: Vec<SurrogateModel>,
        stores: Vec<DataStore>,
    },
}

/// One closed-loop sampling period.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    /// Measured aggregation-stage compositions, reboiler first.
    pub x_agg: Vec<f64>,
    /// Feed composition acting on the plant just after `t`.
    pub x_f_true: f64,
    pub x_f_hat: f64,
    /// Flows applied on (t, t + T_s].
    pub l: f64,
    pub v: f64,
    /// Cumulative objective up to `t`.
    pub phi: f64,
    /// Steadiness weight of this period's data (NaN when none was reconstructed).
    pub weight: f64,
    pub reboiler_residual: f64,
    pub discarded: usize,
    /// Training points stored this period, summed over sections.
    pub stored: usize,
    pub status: String,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective predicted by the controller model.
    pub predicted_objective: f64,
    pub opt_time_s: f64,
    pub train_time_s: f64,
    /// The optimizer failed and the previous move was kept.
    pub fallback: bool,
}

/// Outcome of one section's training in one period.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub t: f64,
    pub section: usize,
    pub outcome: String,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub goal_met: bool,
    pub nodes_added: usize,
    pub hidden_nodes: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub approach: Approach,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    /// Product compositions at every plant grid point.
    pub products: Vec<ProductSample>,
    /// Cumulative objective at each entry of `products`.
    pub phi: Vec<f64>,
    pub training: Vec<TrainingRecord>,
    /// Surrogates at the end of the run (empty for the ideal approach).
    pub models: Vec<SurrogateModel>,
    pub stores: Vec<DataStore>,
    pub plant_calls: usize,
}

impl RunLog {
    pub fn final_phi(&self) -> f64 {
        self.phi.last().copied().unwrap_or(0.0)
    }

    /// Cumulative objective at time `t`, interpolated on the product log.
    pub fn phi_at(&self, t: f64) -> f64 {
        let k = self.products.partition_point(|s| s.t < t);
        if k == 0 {
            return 0.0;
        }
        if k >= self.products.len() {
            return self.final_phi();
        }
        let (a, b) = (&self.products[k - 1], &self.products[k]);
        let w = (t - a.t) / (b.t - a.t);
        self.phi[k - 1] + w * (self.phi[k] - self.phi[k - 1])
    }

    /// Mean growth rate of φ over the last quarter of the run.
    pub fn final_quarter_slope(&self) -> f64 {
        let end = self.products.last().map_or(0.0, |s| s.t);
        let start = 0.75 * end;
        if end <= start {
            return 0.0;
        }
        (self.final_phi() - self.phi_at(start)) / (end - start)
    }

    pub fn optimization_times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.opt_time_s).collect()
    }

    pub fn training_times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.train_time_s).collect()
    }

    pub fn write_steps_csv<W: Write>(&self, agg_stages: &[usize], w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = vec!["t".into(), "l".into(), "v".into()];
        header.extend(agg_stages.iter().map(|s| format!("x_{s}")));
        header.extend(
            [
                "x_f_true",
                "x_f_hat",
                "phi",
                "weight",
                "reboiler_residual",
                "discarded",
                "stored",
                "status",
                "iterations",
                "evaluations",
                "predicted_objective",
                "opt_time_s",
                "train_time_s",
                "fallback",
            ]
            .map(String::from),
        );
        wr.write_record(&header)?;
        for s in &self.steps {
            let mut row: Vec<String> = vec![s.t.to_string(), s.l.to_string(), s.v.to_string()];
            row.extend(s.x_agg.iter().map(|x| x.to_string()));
            row.extend([
                s.x_f_true.to_string(),
                s.x_f_hat.to_string(),
                s.phi.to_string(),
                s.weight.to_string(),
                s.reboiler_residual.to_string(),
                s.discarded.to_string(),
                s.stored.to_string(),
                s.status.clone(),
                s.iterations.to_string(),
                s.evaluations.to_string(),
                s.predicted_objective.to_string(),
                s.opt_time_s.to_string(),
                s.train_time_s.to_string(),
                s.fallback.to_string(),
            ]);
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_products_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "x_d", "x_b", "phi"])?;
        for (s, phi) in self.products.iter().zip(&self.phi) {
            wr.write_record([s.t.to_string(), s.x_d.to_string(), s.x_b.to_string(), phi.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_training_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "t",
            "section",
            "outcome",
            "initial_mse",
            "final_mse",
            "iterations",
            "accepted_steps",
            "goal_met",
            "nodes_added",
            "hidden_nodes",
            "wall_time_s",
        ])?;
        for r in &self.training {
            wr.write_record([
                r.t.to_string(),
                r.section.to_string(),
                r.outcome.clone(),
                r.initial_mse.to_string(),
                r.final_mse.to_string(),
                r.iterations.to_string(),
                r.accepted_steps.to_string(),
                r.goal_met.to_string(),
                r.nodes_added.to_string(),
                r.hidden_nodes.to_string(),
                r.wall_time_s.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn scenario_schedule(s: &Scenario) -> PiecewiseConstant {
    let mut x_f = PiecewiseConstant::new(s.initial_x_f);
    for d in &s.disturbance {
        x_f.push(d.time, d.x_f);
    }
    x_f
}

/// Simulates `scenario` under the given controller. The plant starts at the
/// steady state that meets the set-points for the initial feed.
pub fn run_closed_loop(
    scenario: &Scenario,
    cfg: &RunConfig,
    approach: Approach,
    controller: Controller,
    seed: u64,
) -> Result<RunLog> {
    scenario.validate()?;
    let res = cfg.resolve()?;
    match (&approach, &controller) {
        (Approach::Ideal, Controller::Ideal)
        | (Approach::Adaptive, Controller::Adaptive { .. })
        | (Approach::InitialOnly | Approach::OfflineTrained, Controller::Fixed(_)) => {}
        _ => return Err(Error::Config(format!("controller does not match approach {approach}"))),
    }
    let p = res.params.clone();
    let layout = res.layout.clone();
    let spec = OcpSpec {
        sp_d: scenario.sp_d,
        sp_b: scenario.sp_b,
        ..res.ocp.clone()
    };
    let (l0, v0, x0) = operating_point_for_products(scenario.sp_d, scenario.sp_b, scenario.initial_x_f, &p)?;
    let mut plant = Plant::new(p.clone(), x0, l0, v0, scenario_schedule(scenario));
    plant.rel_tol = cfg.plant.rel_tol;
    plant.abs_tol = cfg.plant.abs_tol;
    let mut noise = NoiseSource::new(cfg.pipeline.measurement_noise, derive_seed(seed, 0x4e4f, 0));

    let (mut models, mut stores) = match controller {
        Controller::Ideal => (Vec::new(), Vec::new()),
        Controller::Fixed(m) => (m, Vec::new()),
        Controller::Adaptive { models, stores } => (models, stores),
    };
    if approach != Approach::Ideal && models.len() != layout.sections.len() {
        return Err(Error::Config(format!(
            "{} surrogates for {} sections",
            models.len(),
            layout.sections.len()
        )));
    }

    let n_steps = (scenario.duration / spec.t_s).round() as usize;
    let mut history: Vec<Measurement> = Vec::with_capacity(n_steps);
    let mut steps = Vec::with_capacity(n_steps);
    let mut training = Vec::new();
    let mut products = vec![plant.products()];
    let mut phi = vec![0.0];
    let mut prev_moves = ControlMoves::constant(l0, v0, spec.n);
    let mut applied = (l0, v0);

    for k in 0..n_steps {
        let t = k as f64 * spec.t_s;
        let m = measure(&plant, &layout, &mut noise);
        history.push(m.clone());
        let deriv = estimate_derivatives(&history).ok();

        let mut weight = f64::NAN;
        let mut reboiler_residual = f64::NAN;
        let mut discarded = 0;
        let mut stored = 0;
        let mut train_time_s = 0.0;
        if approach == Approach::Adaptive && k >= cfg.warmup_steps {
            if let Some(d) = &deriv {
                let start = Instant::now();
                match reconstruct_training_points(&m, d, &layout, &p, cfg.pipeline.kappa) {
                    Ok(rec) => {
                        weight = rec.weight;
                        reboiler_residual = rec.reboiler_residual;
                        discarded = rec.discarded;
                        let batches: Vec<Vec<DataPoint>> =
                            rec.points.into_iter().map(|p| p.into_iter().collect()).collect();
                        let before: usize = stores.iter().map(DataStore::len).sum();
                        let updates = adapt(&mut models, &mut stores, &batches, &cfg.learner, derive_seed(seed, 0x4144, k as u64));
                        stored = stores.iter().map(DataStore::len).sum::<usize>() - before;
                        for (j, u) in updates.into_iter().enumerate() {
                            training.push(training_record(t, j + 1, &u, &models[j]));
                            if let SectionUpdate::Failed(e) = u {
                                warn!("t = {t}: section {} training failed: {e}", j + 1);
                            }
                        }
                    }
                    Err(e) => warn!("t = {t}: reconstruction failed: {e}"),
                }
                train_time_s = start.elapsed().as_secs_f64();
            }
        }

        let zero = DerivEstimate { dxdt: vec![0.0; layout.n_agg()], window: 1 };
        let x_f_hat = estimate_feed_composition(&m, deriv.as_ref().unwrap_or(&zero), &layout, &p);
        let x_f_true = plant.x_f.after(t);

        let warm = if k == 0 { prev_moves.clone() } else { warm_start_shift(&prev_moves) };
        let start = Instant::now();
        let solved = match approach {
            Approach::Ideal => {
                let model = FullOrderModel { params: p.clone(), x_f: x_f_true };
                solve_ocp(&plant.state, &model, &spec, &warm)
            }
            _ => {
                let model = HybridModel::new(p.clone(), layout.clone(), models.clone(), x_f_hat);
                let x0 = DVector::from_vec(m.x_agg.clone());
                solve_ocp(&x0, &model, &spec, &warm)
            }
        };
        let opt_time_s = start.elapsed().as_secs_f64();
        let (status, iterations, evaluations, predicted_objective, fallback) = match solved {
            Ok(sol) => {
                applied = first_move(&sol);
                let r = (sol.status.to_string(), sol.iterations, sol.evaluations, sol.objective, false);
                prev_moves = sol.moves;
                r
            }
            Err(e) => {
                warn!("t = {t}: {approach} optimization failed, keeping the previous move: {e}");
                prev_moves = warm;
                (format!("error: {e}"), 0, 0, f64::NAN, true)
            }
        };
        debug!("{approach} t = {t}: L = {:.5}, V = {:.5}, {status}", applied.0, applied.1);

        steps.push(StepRecord {
            t,
            x_agg: m.x_agg,
            x_f_true,
            x_f_hat,
            l: applied.0,
            v: applied.1,
            phi: *phi.last().expect("non-empty"),
            weight,
            reboiler_residual,
            discarded,
            stored,
            status,
            iterations,
            evaluations,
            predicted_objective,
            opt_time_s,
            train_time_s,
            fallback,
        });

        plant.apply(applied.0, applied.1);
        let log = plant
            .advance(t + spec.t_s, cfg.plant.log_points_per_period)
            .map_err(|e| Error::Integration { t, reason: format!("plant: {e}") })?;
        let mut acc = *phi.last().expect("non-empty");
        for w in log.windows(2) {
            acc += trapezoid(w, spec.sp_d, spec.sp_b);
            products.push(w[1]);
            phi.push(acc);
        }
    }
    debug_assert!(phi.windows(2).all(|w| w[1] >= w[0]));
    Ok(RunLog {
        approach,
        seed,
        steps,
        products,
        phi,
        training,
        models,
        stores,
        plant_calls: plant.calls,
    })
}

fn training_record(t: f64, section: usize, u: &SectionUpdate, model: &SurrogateModel) -> TrainingRecord {
    let mut r = TrainingRecord {
        t,
        section,
        outcome: String::new(),
        initial_mse: f64::NAN,
        final_mse: f64::NAN,
        iterations: 0,
        accepted_steps: 0,
        goal_met: false,
        nodes_added: 0,
        hidden_nodes: model.hidden_count(),
        wall_time_s: 0.0,
    };
    match u {
        SectionUpdate::Skipped => r.outcome = "skipped".into(),
        SectionUpdate::Failed(e) => r.outcome = format!("failed: {e}"),
        SectionUpdate::Trained(rep) => {
            r.outcome = "trained".into();
            r.initial_mse = rep.initial_mse;
            r.final_mse = rep.final_mse;
            r.iterations = rep.iterations;
            r.accepted_steps = rep.accepted_steps;
            r.goal_met = rep.goal_met;
            r.nodes_added = rep.nodes_added;
            r.wall_time_s = rep.wall_time_s;
        }
    }
    r
}
