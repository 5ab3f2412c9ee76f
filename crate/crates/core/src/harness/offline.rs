//! Dense oracle data over each section's reachable input box and the
//! surrogates trained on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::column::{operating_point_for_products, section_steady_solve, vapor_equilibrium};
use crate::error::{Error, Result};
use crate::learner::{grow_and_train, initial_model, weighted_mse, DataPoint, DataStore, Source, TrainReport, TrainingSet};
use crate::lhs::{derive_seed, latin_hypercube, maximin_latin_hypercube};
use crate::surrogate::{features, transform, untransform, SurrogateModel, N_INPUTS};

use super::config::{Resolved, RunConfig};

/// Feature-space box (logit compositions, raw ratio) of one section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureBox {
    pub lo: [f64; N_INPUTS],
    pub hi: [f64; N_INPUTS],
}

impl FeatureBox {
    fn empty() -> Self {
        FeatureBox {
            lo: [f64::INFINITY; N_INPUTS],
            hi: [f64::NEG_INFINITY; N_INPUTS],
        }
    }

    fn include(&mut self, f: &[f64; N_INPUTS]) {
        for k in 0..N_INPUTS {
            self.lo[k] = self.lo[k].min(f[k]);
            self.hi[k] = self.hi[k].max(f[k]);
        }
    }

    fn widened(&self, margin: f64) -> Self {
        let mut b = *self;
        for k in 0..N_INPUTS {
            let w = (self.hi[k] - self.lo[k]) * margin;
            b.lo[k] -= w;
            b.hi[k] += w;
        }
        b
    }

    /// Raw section input at a point of the unit cube.
    fn input_at(&self, u: &[f64]) -> [f64; N_INPUTS] {
        let f: Vec<f64> = (0..N_INPUTS).map(|k| self.lo[k] + u[k] * (self.hi[k] - self.lo[k])).collect();
        [untransform(f[0]), untransform(f[1]), f[2]]
    }
}

/// Section input boxes spanned by the steady states that put both products
/// within `purity_band` (logit) of their set-points, over the feed range.
/// Operating points outside the flow bounds are left out.
pub fn reachable_boxes(cfg: &RunConfig, res: &Resolved, seed: u64) -> Result<Vec<FeatureBox>> {
    let p = &res.params;
    let layout = &res.layout;
    let oc = &cfg.offline;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4f46, 0));
    let design = maximin_latin_hypercube(oc.box_design_points, 3, 8, &mut rng);
    let [xf_lo, xf_hi] = oc.x_f_range;
    let band = |u: f64| oc.purity_band * (2.0 * u - 1.0);
    let mut boxes = vec![FeatureBox::empty(); layout.sections.len()];
    let mut used = 0;
    for u in &design {
        let x_f = xf_lo + u[0] * (xf_hi - xf_lo);
        let x_d = untransform(transform(res.ocp.sp_d) + band(u[1]));
        let x_b = untransform(transform(res.ocp.sp_b) + band(u[2]));
        let (l, v, x) = match operating_point_for_products(x_d, x_b, x_f, p) {
            Ok(op) => op,
            Err(_) => continue,
        };
        if !(p.bounds_l.0..=p.bounds_l.1).contains(&l) || !(p.bounds_v.0..=p.bounds_v.1).contains(&v) {
            continue;
        }
        used += 1;
        for (k, sec) in layout.sections.iter().enumerate() {
            let input = [x[sec.upper - 1], vapor_equilibrium(x[sec.lower - 1], p.alpha), sec.flow_ratio(l, v, p.feed_flow)];
            boxes[k].include(&features(&input));
        }
    }
    if used == 0 {
        return Err(Error::Config("no operating point of the offline design lies within the flow bounds".into()));
    }
    log::debug!("reachable boxes from {used} of {} operating points", design.len());
    Ok(boxes.into_iter().map(|b| b.widened(oc.box_margin)).collect())
}

/// Oracle-labelled LHS design inside `b`; returns the points and the number
/// of design points skipped because the section solve failed.
pub fn oracle_design(
    b: &FeatureBox,
    n: usize,
    tray_count: usize,
    alpha: f64,
    seed: u64,
) -> (Vec<DataPoint>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut skipped = 0;
    let mut pts = Vec::with_capacity(n);
    for u in latin_hypercube(n, N_INPUTS, &mut rng) {
        let input = b.input_at(&u);
        match section_steady_solve(input[0], input[1], input[2], tray_count, alpha) {
            Ok(sol) if sol.x_bot.is_finite() && (0.0..=1.0).contains(&sol.x_bot) => pts.push(DataPoint {
                t: 0.0,
                input,
                target: sol.x_bot,
                weight: 1.0,
                source: Source::OfflineOracle,
            }),
            _ => skipped += 1,
        }
    }
    (pts, skipped)
}

#[derive(Debug, Clone)]
pub struct OfflineResult {
    pub boxes: Vec<FeatureBox>,
    pub stores: Vec<DataStore>,
    /// Oracle failures per section.
    pub skipped: Vec<usize>,
    pub models: Vec<SurrogateModel>,
    pub reports: Vec<TrainReport>,
    /// Logit-space MSE on an independent design of `held_out_points`.
    pub held_out_mse: Vec<f64>,
}

/// Builds the oracle data set and trains one surrogate per section.
pub fn generate_offline_dataset(cfg: &RunConfig, seed: u64) -> Result<OfflineResult> {
    let res = cfg.resolve()?;
    let oc = &cfg.offline;
    if oc.points_per_section == 0 {
        return Err(Error::EmptyData);
    }
    let boxes = reachable_boxes(cfg, &res, seed)?;
    let alpha = res.params.alpha;
    let per_section: Vec<Result<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = res
            .layout
            .sections
            .iter()
            .zip(&boxes)
            .enumerate()
            .map(|(k, (sec, b))| {
                scope.spawn(move || {
                    let kk = k as u64;
                    let (pts, skipped) = oracle_design(b, oc.points_per_section, sec.tray_count, alpha, derive_seed(seed, 0x4f46, 1 + kk));
                    let (held, _) = oracle_design(b, oc.held_out_points.max(1), sec.tray_count, alpha, derive_seed(seed, 0x484f, kk));
                    let mut store = DataStore::new(k + 1, 0.0);
                    store.append(&pts);
                    let set = TrainingSet::from_points(pts);
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4f54, kk));
                    let m0 = initial_model(k + 1, &set, cfg.learner.initial_hidden, &mut rng)?;
                    let (model, report) = grow_and_train(&m0, &set, &oc.train, &mut rng)?;
                    let mse = weighted_mse(&model, &TrainingSet::from_points(held), 1.0)?;
                    Ok((store, skipped, model, report, mse))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("offline training panicked".into()))))
            .collect()
    });
    let mut out = OfflineResult {
        boxes,
        stores: Vec::new(),
        skipped: Vec::new(),
        models: Vec::new(),
        reports: Vec::new(),
        held_out_mse: Vec::new(),
    };
    for r in per_section {
        let (store, skipped, model, report, mse) = r?;
        out.stores.push(store);
        out.skipped.push(skipped);
        out.models.push(model);
        out.reports.push(report);
        out.held_out_mse.push(mse);
    }
    Ok(out)
}
