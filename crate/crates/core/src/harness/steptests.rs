//! Open-loop step tests on the plant and initial surrogate training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::column::{operating_point_for_products, PlantState};
use crate::error::{Error, Result};
use crate::learner::{grow_and_train, initial_model, DataPoint, DataStore, Source, TrainReport, TrainingSet};
use crate::lhs::{derive_seed, latin_hypercube};
use crate::pipeline::{estimate_derivatives, reconstruct_training_points, Measurement};
use crate::surrogate::SurrogateModel;

use super::config::{Resolved, RunConfig};
use super::plant::{Plant, PiecewiseConstant};
use super::{measure, NoiseSource};

/// Step targets and times of one open-loop trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDesign {
    pub l: f64,
    pub v: f64,
    pub x_f: f64,
    pub t_l: f64,
    pub t_v: f64,
    pub t_x_f: f64,
}

/// Steady operating point the step tests start from.
#[derive(Debug, Clone)]
pub struct Nominal {
    pub l: f64,
    pub v: f64,
    pub x_f: f64,
    pub state: PlantState,
}

pub fn nominal_point(res: &Resolved) -> Result<Nominal> {
    let x_f = res.params.feed_comp_nominal;
    let (l, v, state) = operating_point_for_products(res.ocp.sp_d, res.ocp.sp_b, x_f, &res.params)?;
    Ok(Nominal { l, v, x_f, state })
}

/// Latin hypercube over the three step targets and their three times.
pub fn step_designs(cfg: &RunConfig, res: &Resolved, nominal: &Nominal, seed: u64) -> Vec<StepDesign> {
    let st = &cfg.step_tests;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5354, 0));
    let f = st.flow_step_fraction;
    let l_lo = (nominal.l * (1.0 - f)).max(res.params.bounds_l.0);
    let l_hi = (nominal.l * (1.0 + f)).min(res.params.bounds_l.1);
    let v_lo = (nominal.v * (1.0 - f)).max(res.params.bounds_v.0);
    let v_hi = (nominal.v * (1.0 + f)).min(res.params.bounds_v.1);
    let [xf_lo, xf_hi] = st.x_f_range;
    latin_hypercube(st.trajectories, 6, &mut rng)
        .into_iter()
        .map(|u| StepDesign {
            l: l_lo + u[0] * (l_hi - l_lo),
            v: v_lo + u[1] * (v_hi - v_lo),
            x_f: xf_lo + u[2] * (xf_hi - xf_lo),
            t_l: u[3] * st.duration,
            t_v: u[4] * st.duration,
            t_x_f: u[5] * st.duration,
        })
        .collect()
}

/// Measurements every sampling period, t = 0 to the trajectory end.
pub fn simulate_step_test(
    cfg: &RunConfig,
    res: &Resolved,
    nominal: &Nominal,
    design: &StepDesign,
    noise: &mut NoiseSource,
) -> Result<Vec<Measurement>> {
    let mut x_f = PiecewiseConstant::new(nominal.x_f);
    x_f.push(design.t_x_f, design.x_f);
    let mut plant = Plant::new(res.params.clone(), nominal.state.clone(), nominal.l, nominal.v, x_f);
    plant.l.push(design.t_l, design.l);
    plant.v.push(design.t_v, design.v);
    plant.rel_tol = cfg.plant.rel_tol;
    plant.abs_tol = cfg.plant.abs_tol;
    let ts = res.ocp.t_s;
    let samples = samples_per_trajectory(cfg, res);
    let mut out = Vec::with_capacity(samples);
    out.push(measure(&plant, &res.layout, noise));
    for k in 1..samples {
        plant.advance(k as f64 * ts, 1)?;
        out.push(measure(&plant, &res.layout, noise));
    }
    Ok(out)
}

pub fn samples_per_trajectory(cfg: &RunConfig, res: &Resolved) -> usize {
    (cfg.step_tests.duration / res.ocp.t_s).floor() as usize + 1
}

/// Row accounting of the open-loop data set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTestCounts {
    pub trajectories: usize,
    pub samples_per_trajectory: usize,
    pub warmup_per_trajectory: usize,
    /// Targets outside [0, 1], per section.
    pub discarded: Vec<usize>,
    /// Points under the store's weight floor, per section.
    pub below_floor: Vec<usize>,
    /// Stored rows, per section.
    pub stored: Vec<usize>,
}

impl StepTestCounts {
    /// Candidate points per section before discards.
    pub fn reconstructed(&self) -> usize {
        self.trajectories * (self.samples_per_trajectory - self.warmup_per_trajectory)
    }
}

/// Runs every measurement after the warm-up through the balance cascade.
pub fn measurements_to_points(
    cfg: &RunConfig,
    res: &Resolved,
    history: &[Measurement],
    source: Source,
    discarded: &mut [usize],
) -> Result<Vec<Vec<DataPoint>>> {
    let n_sec = res.layout.sections.len();
    let mut out = vec![Vec::new(); n_sec];
    for i in cfg.warmup_steps..history.len() {
        let d = estimate_derivatives(&history[..=i])?;
        let rec = reconstruct_training_points(&history[i], &d, &res.layout, &res.params, cfg.pipeline.kappa)?;
        for (k, p) in rec.points.into_iter().enumerate() {
            match p {
                Some(mut p) => {
                    p.source = source;
                    out[k].push(p);
                }
                None => discarded[k] += 1,
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StepTestOutput {
    pub nominal: Nominal,
    pub designs: Vec<StepDesign>,
    pub stores: Vec<DataStore>,
    pub counts: StepTestCounts,
}

/// Simulates the open-loop trajectories and collects their training data.
pub fn collect_step_test_data(cfg: &RunConfig, seed: u64, designs: Option<Vec<StepDesign>>) -> Result<StepTestOutput> {
    let res = cfg.resolve()?;
    let nominal = nominal_point(&res)?;
    let designs = designs.unwrap_or_else(|| step_designs(cfg, &res, &nominal, seed));
    let n_sec = res.layout.sections.len();
    let mut stores: Vec<DataStore> = (0..n_sec).map(|k| DataStore::new(k + 1, cfg.learner.weight_floor)).collect();
    let mut discarded = vec![0; n_sec];
    let mut below_floor = vec![0; n_sec];
    let mut noise = NoiseSource::new(cfg.pipeline.measurement_noise, derive_seed(seed, 0x5354, 1));
    for (j, design) in designs.iter().enumerate() {
        let history = simulate_step_test(cfg, &res, &nominal, design, &mut noise).map_err(|e| Error::Integration {
            t: 0.0,
            reason: format!("step-test trajectory {j}: {e}"),
        })?;
        let points = measurements_to_points(cfg, &res, &history, Source::OpenLoop, &mut discarded)?;
        for (k, pts) in points.iter().enumerate() {
            let kept = stores[k].append(pts);
            below_floor[k] += pts.len() - kept.len();
        }
    }
    let counts = StepTestCounts {
        trajectories: designs.len(),
        samples_per_trajectory: samples_per_trajectory(cfg, &res),
        warmup_per_trajectory: cfg.warmup_steps,
        discarded,
        below_floor,
        stored: stores.iter().map(DataStore::len).collect(),
    };
    Ok(StepTestOutput { nominal, designs, stores, counts })
}

/// Fits one fresh surrogate per store with constructive training.
pub fn train_initial_models(
    cfg: &RunConfig,
    stores: &[DataStore],
    seed: u64,
) -> Result<(Vec<SurrogateModel>, Vec<TrainReport>)> {
    let results: Vec<Result<(SurrogateModel, TrainReport)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = stores
            .iter()
            .enumerate()
            .map(|(k, store)| {
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x494e, k as u64));
                    let set = TrainingSet::from_points(store.points().to_vec());
                    let m0 = initial_model(store.section_id, &set, cfg.learner.initial_hidden, &mut rng)?;
                    grow_and_train(&m0, &set, &cfg.learner.train, &mut rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("initial training panicked".into()))))
            .collect()
    });
    let mut models = Vec::with_capacity(stores.len());
    let mut reports = Vec::with_capacity(stores.len());
    for r in results {
        let (m, rep) = r?;
        models.push(m);
        reports.push(rep);
    }
    Ok((models, reports))
}

/// Step tests followed by initial training.
#[derive(Debug, Clone)]
pub struct InitialModels {
    pub data: StepTestOutput,
    pub models: Vec<SurrogateModel>,
    pub reports: Vec<TrainReport>,
}

pub fn run_step_tests(cfg: &RunConfig, seed: u64) -> Result<InitialModels> {
    let data = collect_step_test_data(cfg, seed, None)?;
    let (models, reports) = train_initial_models(cfg, &data.stores, seed)?;
    Ok(InitialModels { data, models, reports })
}
