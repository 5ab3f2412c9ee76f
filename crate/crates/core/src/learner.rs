//! Online constructive learning of the section surrogates: persistent data
//! storage, replay sampling, weighted Levenberg-Marquardt and node growth.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lhs::{derive_seed, maximin_latin_hypercube};
use crate::surrogate::{features, transform, InputScaling, SurrogateModel, N_INPUTS, PARAMS_PER_NODE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    OpenLoop,
    ClosedLoop,
    OfflineOracle,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::OpenLoop => "open-loop",
            Source::ClosedLoop => "closed-loop",
            Source::OfflineOracle => "offline-oracle",
        })
    }
}

/// One training sample of a section surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataPoint {
    pub t: f64,
    /// (x_upper, y_lower, r)
    pub input: [f64; N_INPUTS],
    /// x_bot
    pub target: f64,
    pub weight: f64,
    pub source: Source,
}

#[derive(Debug, Serialize, Deserialize)]
struct DataRow {
    t: f64,
    x_upper: f64,
    y_lower: f64,
    r: f64,
    x_bot: f64,
    weight: f64,
    source: Source,
}

/// Append-only storage of every point seen by one section learner.
#[derive(Debug, Clone)]
pub struct DataStore {
    pub section_id: usize,
    pub weight_floor: f64,
    points: Vec<DataPoint>,
    /// Bounding box of the stored inputs in feature space (logit compositions, raw r).
    bounds: Option<([f64; N_INPUTS], [f64; N_INPUTS])>,
}

impl DataStore {
    pub fn new(section_id: usize, weight_floor: f64) -> Self {
        DataStore {
            section_id,
            weight_floor,
            points: Vec::new(),
            bounds: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn bounds(&self) -> Option<([f64; N_INPUTS], [f64; N_INPUTS])> {
        self.bounds
    }

    /// Appends the points whose weight reaches the floor; returns the accepted ones.
    pub fn append(&mut self, points: &[DataPoint]) -> Vec<DataPoint> {
        let mut kept = Vec::with_capacity(points.len());
        for p in points {
            if !(p.weight.is_finite() && p.weight >= self.weight_floor) {
                continue;
            }
            if !(p.input.iter().all(|v| v.is_finite()) && p.target.is_finite()) {
                continue;
            }
            let f = features(&p.input);
            match &mut self.bounds {
                None => self.bounds = Some((f, f)),
                Some((lo, hi)) => {
                    for k in 0..N_INPUTS {
                        lo[k] = lo[k].min(f[k]);
                        hi[k] = hi[k].max(f[k]);
                    }
                }
            }
            self.points.push(*p);
            kept.push(*p);
        }
        kept
    }

    /// CSV with columns `t,x_upper,y_lower,r,x_bot,weight,source`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.points {
            w.serialize(DataRow {
                t: p.t,
                x_upper: p.input[0],
                y_lower: p.input[1],
                r: p.input[2],
                x_bot: p.target,
                weight: p.weight,
                source: p.source,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(section_id: usize, weight_floor: f64, reader: R) -> Result<Self> {
        let mut store = DataStore::new(section_id, weight_floor);
        let mut rows = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let r: DataRow = row?;
            rows.push(DataPoint {
                t: r.t,
                input: [r.x_upper, r.y_lower, r.r],
                target: r.x_bot,
                weight: r.weight,
                source: r.source,
            });
        }
        store.append(&rows);
        Ok(store)
    }
}

/// Number of candidate designs in the maximin replay design.
const REPLAY_DESIGN_CANDIDATES: usize = 8;

/// Replay selection: nearest stored neighbours of a Latin hypercube design
/// laid over the store's bounding box, duplicates removed.
pub fn replay_sample<R: Rng + ?Sized>(store: &DataStore, m: usize, rng: &mut R) -> Result<Vec<DataPoint>> {
    let (lo, hi) = store.bounds.ok_or(Error::EmptyData)?;
    if m == 0 {
        return Err(Error::InvalidParams("replay size must be at least 1".into()));
    }
    let width: Vec<f64> = (0..N_INPUTS)
        .map(|k| if hi[k] - lo[k] > 0.0 { hi[k] - lo[k] } else { 1.0 })
        .collect();
    let normalized: Vec<[f64; N_INPUTS]> = store
        .points
        .iter()
        .map(|p| {
            let f = features(&p.input);
            let mut z = [0.0; N_INPUTS];
            for k in 0..N_INPUTS {
                z[k] = (f[k] - lo[k]) / width[k];
            }
            z
        })
        .collect();
    let design = maximin_latin_hypercube(m, N_INPUTS, REPLAY_DESIGN_CANDIDATES, rng);
    let mut chosen = vec![false; store.len()];
    let mut order = Vec::new();
    for q in &design {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, z) in normalized.iter().enumerate() {
            let d: f64 = (0..N_INPUTS).map(|k| (z[k] - q[k]) * (z[k] - q[k])).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        if !chosen[best] {
            chosen[best] = true;
            order.push(best);
        }
    }
    Ok(order.into_iter().map(|i| store.points[i]).collect())
}

/// Points of one training cycle; `is_new` marks the fresh closed-loop data.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub points: Vec<DataPoint>,
    pub is_new: Vec<bool>,
}

impl TrainingSet {
    pub fn from_points(points: Vec<DataPoint>) -> Self {
        let is_new = vec![false; points.len()];
        TrainingSet { points, is_new }
    }

    pub fn push(&mut self, p: DataPoint, is_new: bool) {
        self.points.push(p);
        self.is_new.push(is_new);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iterations: usize,
    /// Weighted MSE goal in the scaled (logit) output space.
    pub goal_mse: f64,
    pub new_data_weight_factor: f64,
    pub max_nodes: usize,
    /// Random restarts when initializing a new node.
    pub init_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 100,
            goal_mse: 1e-6,
            new_data_weight_factor: 5.0,
            max_nodes: 30,
            init_candidates: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Jacobian evaluations over all cycles.
    pub iterations: usize,
    pub accepted_steps: usize,
    pub goal_met: bool,
    pub nodes_added: usize,
    pub wall_time_s: f64,
}

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_DEC: f64 = 0.1;
const LAMBDA_INC: f64 = 10.0;
const LAMBDA_MAX: f64 = 1e10;

/// Training samples prepared for one model's scaling.
struct Prepared {
    z: Vec<[f64; N_INPUTS]>,
    target: Vec<f64>,
    weight: Vec<f64>,
    weight_sum: f64,
}

fn prepare(model: &SurrogateModel, set: &TrainingSet, factor: f64) -> Result<Prepared> {
    if set.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut p = Prepared {
        z: Vec::with_capacity(set.len()),
        target: Vec::with_capacity(set.len()),
        weight: Vec::with_capacity(set.len()),
        weight_sum: 0.0,
    };
    for (pt, &new) in set.points.iter().zip(&set.is_new) {
        let w = if new { pt.weight * factor } else { pt.weight };
        p.z.push(model.scaled_input(&pt.input));
        p.target.push(transform(pt.target));
        p.weight.push(w);
        p.weight_sum += w;
    }
    if !(p.weight_sum > 0.0 && p.weight_sum.is_finite()) {
        return Err(Error::EmptyData);
    }
    Ok(p)
}

fn prepared_mse(model: &SurrogateModel, data: &Prepared) -> f64 {
    let mut s = 0.0;
    for j in 0..data.z.len() {
        let r = data.target[j] - model.forward_scaled(&data.z[j]);
        s += data.weight[j] * r * r;
    }
    s / data.weight_sum
}

/// Weighted MSE of `model` on `set` in the scaled output space.
pub fn weighted_mse(model: &SurrogateModel, set: &TrainingSet, new_data_weight_factor: f64) -> Result<f64> {
    let data = prepare(model, set, new_data_weight_factor)?;
    Ok(prepared_mse(model, &data))
}

struct LmOutcome {
    model: SurrogateModel,
    mse: f64,
    iterations: usize,
    accepted: usize,
}

/// Levenberg-Marquardt over the parameters in `free`; all others stay fixed.
fn lm_core(
    model: &SurrogateModel,
    data: &Prepared,
    free: Range<usize>,
    max_iterations: usize,
    goal_mse: f64,
) -> LmOutcome {
    let m = data.z.len();
    let np = free.len();
    let mut w = model.weights();
    let mut current = model.clone();
    let mut mse = prepared_mse(&current, data);
    let mut lambda = LAMBDA_INIT;
    let mut iterations = 0;
    let mut accepted = 0;
    let mut row = vec![0.0; model.n_weights()];
    let mut jw = DMatrix::zeros(m, np);
    let mut rw = DVector::zeros(m);
    while iterations < max_iterations && mse > goal_mse && lambda <= LAMBDA_MAX {
        iterations += 1;
        for j in 0..m {
            current.weight_jacobian_scaled(&data.z[j], &mut row);
            let sw = (data.weight[j] / data.weight_sum).sqrt();
            for (c, k) in free.clone().enumerate() {
                jw[(j, c)] = sw * row[k];
            }
            rw[j] = sw * (data.target[j] - current.forward_scaled(&data.z[j]));
        }
        let a = jw.tr_mul(&jw);
        let g = jw.tr_mul(&rw);
        let mut improved = false;
        while lambda <= LAMBDA_MAX {
            let mut damped = a.clone();
            for i in 0..np {
                damped[(i, i)] += lambda;
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&g),
                None => {
                    lambda *= LAMBDA_INC;
                    continue;
                }
            };
            let mut trial_w = w.clone();
            for (c, k) in free.clone().enumerate() {
                trial_w[k] += step[c];
            }
            let trial = model.with_weights(&trial_w);
            let trial_mse = prepared_mse(&trial, data);
            if trial_mse.is_finite() && trial_mse < mse {
                w = trial_w;
                current = trial;
                mse = trial_mse;
                lambda *= LAMBDA_DEC;
                accepted += 1;
                improved = true;
                break;
            }
            lambda *= LAMBDA_INC;
        }
        if !improved {
            break;
        }
    }
    LmOutcome {
        model: current,
        mse,
        iterations,
        accepted,
    }
}

/// Weighted LM training over all weights, starting from `model`.
pub fn lm_train(model: &SurrogateModel, set: &TrainingSet, cfg: &TrainConfig) -> Result<(SurrogateModel, TrainReport)> {
    let start = Instant::now();
    let data = prepare(model, set, cfg.new_data_weight_factor)?;
    let initial_mse = prepared_mse(model, &data);
    if !initial_mse.is_finite() {
        return Err(Error::NonFinite("training error"));
    }
    let out = lm_core(model, &data, 0..model.n_weights(), cfg.max_iterations, cfg.goal_mse);
    let report = TrainReport {
        initial_mse,
        final_mse: out.mse,
        iterations: out.iterations,
        accepted_steps: out.accepted,
        goal_met: out.mse <= cfg.goal_mse,
        nodes_added: 0,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((out.model, report))
}

/// Fits the last (freshly added) node to the residual of the rest of the
/// network. The node is restarted from `cfg.init_candidates` random input
/// weights with zero output weight, so the starting output is unchanged; the
/// best candidate is kept.
pub fn init_new_node<R: Rng + ?Sized>(
    model: &SurrogateModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SurrogateModel> {
    let h = model.hidden_count();
    let last = model.nodes[h - 1];
    if last.output_weight != 0.0 {
        return Err(Error::InvalidParams("the last node is not a fresh node".into()));
    }
    let data = prepare(model, set, cfg.new_data_weight_factor)?;
    let block = PARAMS_PER_NODE * (h - 1)..PARAMS_PER_NODE * h;
    let mut best = model.clone();
    let mut best_mse = prepared_mse(model, &data);
    for _ in 0..cfg.init_candidates.max(1) {
        let mut candidate = model.clone();
        let node = &mut candidate.nodes[h - 1];
        for wk in node.weights.iter_mut() {
            *wk = rng.gen_range(-1.0..1.0);
        }
        node.bias = rng.gen_range(-1.0..1.0);
        node.output_weight = 0.0;
        let out = lm_core(&candidate, &data, block.clone(), cfg.max_iterations, 0.0);
        if out.mse < best_mse {
            best_mse = out.mse;
            best = out.model;
        }
    }
    Ok(best)
}

/// Constructive training: train; while the goal is missed, restore the
/// pre-cycle model, add a node, initialize it on the residual and retrain.
/// Returns the lowest-error model seen (never worse than the input).
pub fn grow_and_train<R: Rng + ?Sized>(
    model: &SurrogateModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(SurrogateModel, TrainReport)> {
    let start = Instant::now();
    let (trained, first) = lm_train(model, set, cfg)?;
    let mut report = first.clone();
    let mut best = trained;
    let mut best_mse = first.final_mse;
    let mut goal_met = first.goal_met;
    let mut base = model.clone();
    while !goal_met && base.hidden_count() < cfg.max_nodes {
        let grown = init_new_node(&base.add_node(cfg.max_nodes)?, set, cfg, rng)?;
        let (trained, r) = lm_train(&grown, set, cfg)?;
        report.iterations += r.iterations;
        report.accepted_steps += r.accepted_steps;
        if r.final_mse < best_mse {
            best_mse = r.final_mse;
            best = trained;
        }
        log::debug!(
            "section {}: {} nodes, mse {:.3e} after {} iterations ({:.1} s)",
            model.section_id,
            grown.hidden_count(),
            r.final_mse,
            r.iterations,
            start.elapsed().as_secs_f64()
        );
        goal_met = r.goal_met;
        base = grown;
    }
    report.final_mse = best_mse;
    report.goal_met = best_mse <= cfg.goal_mse;
    report.nodes_added = best.hidden_count() - model.hidden_count();
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((best, report))
}

/// Untrained model for a data set: scaling from the data's feature box,
/// random input weights, zero output weights and the mean target as bias.
pub fn initial_model<R: Rng + ?Sized>(
    section_id: usize,
    set: &TrainingSet,
    hidden_count: usize,
    rng: &mut R,
) -> Result<SurrogateModel> {
    if set.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut lo = [f64::INFINITY; N_INPUTS];
    let mut hi = [f64::NEG_INFINITY; N_INPUTS];
    let mut mean = 0.0;
    let mut wsum = 0.0;
    for p in &set.points {
        let f = features(&p.input);
        for k in 0..N_INPUTS {
            lo[k] = lo[k].min(f[k]);
            hi[k] = hi[k].max(f[k]);
        }
        mean += p.weight * transform(p.target);
        wsum += p.weight;
    }
    let bias = if wsum > 0.0 { mean / wsum } else { 0.0 };
    let mut model = SurrogateModel::constant(section_id, 0.5, hidden_count, InputScaling::from_box(lo, hi));
    model.output_bias = bias;
    for n in &mut model.nodes {
        for wk in n.weights.iter_mut() {
            *wk = rng.gen_range(-1.0..1.0);
        }
        n.bias = rng.gen_range(-1.0..1.0);
    }
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Replay points drawn per section and cycle.
    pub replay_size: usize,
    pub weight_floor: f64,
    pub initial_hidden: usize,
    pub train: TrainConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            replay_size: 200,
            weight_floor: 1e-3,
            initial_hidden: 3,
            train: TrainConfig::default(),
        }
    }
}

/// Outcome of one section in an [`adapt`] call.
#[derive(Debug)]
pub enum SectionUpdate {
    /// No new point reached the weight floor.
    Skipped,
    Trained(TrainReport),
    Failed(Error),
}

fn adapt_section(
    model: &mut SurrogateModel,
    store: &mut DataStore,
    new_points: &[DataPoint],
    cfg: &LearnerConfig,
    seed: u64,
) -> SectionUpdate {
    let kept = store.append(new_points);
    if kept.is_empty() {
        return SectionUpdate::Skipped;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TrainingSet::default();
    for p in kept {
        set.push(p, true);
    }
    match replay_sample(store, cfg.replay_size, &mut rng) {
        Ok(replay) => replay.into_iter().for_each(|p| set.push(p, false)),
        Err(e) => return SectionUpdate::Failed(e),
    }
    match grow_and_train(model, &set, &cfg.train, &mut rng) {
        Ok((m, report)) => {
            *model = m;
            SectionUpdate::Trained(report)
        }
        Err(e) => SectionUpdate::Failed(e),
    }
}

/// One adaptation cycle over all sections, trained concurrently. Each
/// section draws from its own stream derived from `seed`, so the result does
/// not depend on thread scheduling. A failing section leaves its model as is.
pub fn adapt(
    models: &mut [SurrogateModel],
    stores: &mut [DataStore],
    new_points: &[Vec<DataPoint>],
    cfg: &LearnerConfig,
    seed: u64,
) -> Vec<SectionUpdate> {
    assert_eq!(models.len(), stores.len(), "one store per model");
    assert_eq!(models.len(), new_points.len(), "one point batch per model");
    std::thread::scope(|scope| {
        let handles: Vec<_> = models
            .iter_mut()
            .zip(stores.iter_mut())
            .zip(new_points)
            .enumerate()
            .map(|(k, ((model, store), pts))| {
                let s = derive_seed(seed, k as u64, 0);
                scope.spawn(move || adapt_section(model, store, pts, cfg, s))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| SectionUpdate::Failed(Error::Config("section learner panicked".into())))
            })
            .collect()
    })
}
