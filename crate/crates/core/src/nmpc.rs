//! Set-point tracking NMPC by single shooting with forward sensitivities and
//! a projected quasi-Newton method in normalized move coordinates.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::column::{full_input_jacobian, full_jacobian, full_rhs, AggregationLayout, ColumnInputs, ColumnParams};
use crate::error::{Error, Result};
use crate::hybrid::{hybrid_derivatives, hybrid_rhs, SectionModel};
use crate::integrator::{integrate, integrate_with_sensitivities, IvpProblem, OdeSystem, Tolerance};

/// Dynamic model used inside the optimizer, with the feed held constant.
pub trait ControllerModel: Send + Sync {
    fn dim(&self) -> usize;
    /// Indices of x_D and x_B in the state vector.
    fn product_indices(&self) -> (usize, usize);
    fn rhs(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DVector<f64>>;
    /// d f / d x.
    fn state_jacobian(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DMatrix<f64>>;
    /// d f / d (L, V).
    fn input_jacobian(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DMatrix<f64>>;
    /// State and input Jacobians together.
    fn jacobians(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.state_jacobian(x, l, v)?, self.input_jacobian(x, l, v)?))
    }
}

/// Full-order column as controller model.
#[derive(Debug, Clone)]
pub struct FullOrderModel {
    pub params: ColumnParams,
    pub x_f: f64,
}

impl FullOrderModel {
    fn inputs(&self, l: f64, v: f64) -> ColumnInputs {
        ColumnInputs::new(l, v, self.params.feed_flow, self.x_f)
    }
}

impl ControllerModel for FullOrderModel {
    fn dim(&self) -> usize {
        self.params.n_total
    }
    fn product_indices(&self) -> (usize, usize) {
        (self.params.n_total - 1, 0)
    }
    fn rhs(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DVector<f64>> {
        full_rhs(x, &self.inputs(l, v), &self.params)
    }
    fn state_jacobian(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DMatrix<f64>> {
        Ok(full_jacobian(x, &self.inputs(l, v), &self.params))
    }
    fn input_jacobian(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DMatrix<f64>> {
        Ok(full_input_jacobian(x, &self.inputs(l, v), &self.params))
    }
}

/// Hybrid stage-aggregation model as controller model.
pub struct HybridModel<S: SectionModel> {
    pub params: ColumnParams,
    pub layout: AggregationLayout,
    pub sections: S,
    pub x_f: f64,
    clamped: AtomicUsize,
}

impl<S: SectionModel> HybridModel<S> {
    pub fn new(params: ColumnParams, layout: AggregationLayout, sections: S, x_f: f64) -> Self {
        HybridModel {
            params,
            layout,
            sections,
            x_f,
            clamped: AtomicUsize::new(0),
        }
    }

    /// Right-hand side evaluations with at least one clamped section prediction.
    pub fn clamped_evaluations(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    fn eval(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<crate::hybrid::HybridRhs> {
        let u = ColumnInputs::new(l, v, self.params.feed_flow, self.x_f);
        let r = hybrid_rhs(x, &u, &self.sections, &self.params, &self.layout)?;
        if r.clamped {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        Ok(r)
    }
}

impl<S: SectionModel> ControllerModel for HybridModel<S> {
    fn dim(&self) -> usize {
        self.layout.n_agg()
    }
    fn product_indices(&self) -> (usize, usize) {
        (self.layout.n_agg() - 1, 0)
    }
    fn rhs(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DVector<f64>> {
        let u = ColumnInputs::new(l, v, self.params.feed_flow, self.x_f);
        let (d, clamped) = hybrid_derivatives(x, &u, &self.sections, &self.params, &self.layout)?;
        if clamped {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        Ok(d)
    }
    fn state_jacobian(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DMatrix<f64>> {
        Ok(self.eval(x, l, v)?.state_jacobian)
    }
    fn input_jacobian(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<DMatrix<f64>> {
        Ok(self.eval(x, l, v)?.input_jacobian)
    }
    fn jacobians(&self, x: &DVector<f64>, l: f64, v: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let r = self.eval(x, l, v)?;
        Ok((r.state_jacobian, r.input_jacobian))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OcpSpec {
    /// Control horizon (s).
    pub t_c: f64,
    /// Prediction horizon (s).
    pub t_p: f64,
    /// Control intervals.
    pub n: usize,
    /// Sampling time (s).
    pub t_s: f64,
    pub sp_d: f64,
    pub sp_b: f64,
    pub bounds_l: (f64, f64),
    pub bounds_v: (f64, f64),
    /// Factor applied to the quadrature state and to the objective the
    /// optimizer sees; the stopping tolerances refer to the scaled objective.
    pub objective_scale: f64,
    pub rel_tol: f64,
    /// Absolute tolerance on compositions; the quadrature uses `rel_tol`-scaled units.
    pub abs_tol: f64,
    pub max_iterations: usize,
    /// Objective evaluations per solve; the deterministic stand-in for the wall-time budget.
    pub max_evaluations: usize,
    pub pg_tol: f64,
    pub decrease_tol: f64,
}

impl OcpSpec {
    pub fn for_params(p: &ColumnParams) -> Self {
        OcpSpec {
            t_c: 600.0,
            t_p: 1200.0,
            n: 10,
            t_s: 60.0,
            sp_d: 0.99995,
            sp_b: 0.00005,
            bounds_l: p.bounds_l,
            bounds_v: p.bounds_v,
            objective_scale: 1e5,
            rel_tol: 1e-7,
            abs_tol: 1e-11,
            max_iterations: 40,
            max_evaluations: 80,
            pg_tol: 1e-6,
            decrease_tol: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.n == 0 || !(self.t_c > 0.0 && self.t_s > 0.0) {
            return bad("horizon, intervals and sampling time must be positive");
        }
        if self.t_p < self.t_c {
            return bad("prediction horizon shorter than control horizon");
        }
        if self.t_c / self.n as f64 + 1e-9 < self.t_s {
            return bad("control intervals shorter than the sampling time");
        }
        if !(self.bounds_l.0 <= self.bounds_l.1 && self.bounds_v.0 <= self.bounds_v.1) {
            return bad("control bounds are not ordered");
        }
        if !(self.objective_scale > 0.0) {
            return bad("objective scale must be positive");
        }
        Ok(())
    }

    pub fn interval(&self) -> f64 {
        self.t_c / self.n as f64
    }
}

/// Piecewise constant (L, V) per control interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMoves(pub Vec<(f64, f64)>);

impl ControlMoves {
    pub fn constant(l: f64, v: f64, n: usize) -> Self {
        ControlMoves(vec![(l, v); n])
    }

    fn to_normalized(&self, spec: &OcpSpec) -> Vec<f64> {
        let (ll, lh) = spec.bounds_l;
        let (vl, vh) = spec.bounds_v;
        let unit = |x: f64, lo: f64, hi: f64| if hi > lo { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        self.0
            .iter()
            .flat_map(|&(l, v)| [unit(l, ll, lh), unit(v, vl, vh)])
            .collect()
    }

    fn from_normalized(u: &[f64], spec: &OcpSpec) -> Self {
        let (ll, lh) = spec.bounds_l;
        let (vl, vh) = spec.bounds_v;
        ControlMoves(
            u.chunks(2)
                .map(|c| (ll + c[0] * (lh - ll), vl + c[1] * (vh - vl)))
                .collect(),
        )
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|&(l, v)| [l, v]).collect()
    }
}

/// Receding-horizon initial guess: drop the first move, repeat the last.
pub fn warm_start_shift(previous: &ControlMoves) -> ControlMoves {
    let mut m = previous.0.clone();
    if m.len() > 1 {
        m.remove(0);
        let last = *m.last().expect("non-empty");
        m.push(last);
    }
    ControlMoves(m)
}

pub fn first_move(solution: &OcpSolution) -> (f64, f64) {
    solution.moves.0[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    /// Projected gradient below tolerance.
    Optimal,
    /// Objective decrease below tolerance.
    Stalled,
    IterationLimit,
    /// Evaluation budget exhausted.
    Budget,
    LineSearchFailed,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Stalled => "stalled",
            SolveStatus::IterationLimit => "iteration-limit",
            SolveStatus::Budget => "budget",
            SolveStatus::LineSearchFailed => "line-search-failed",
        })
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub moves: ControlMoves,
    /// Unscaled objective.
    pub objective: f64,
    /// Infinity norm of the projected scaled gradient in normalized coordinates.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub wall_time_s: f64,
    pub status: SolveStatus,
    /// Objective of every accepted iterate (non-increasing).
    pub history: Vec<f64>,
}

/// Model state augmented with the scaled tracking-error quadrature; the
/// parameters are all 2N move values, of which `active` drives this segment.
struct ShootingOde<'a> {
    model: &'a dyn ControllerModel,
    spec: &'a OcpSpec,
    active: usize,
}

impl ShootingOde<'_> {
    fn flows(&self, p: &[f64]) -> (f64, f64) {
        (p[2 * self.active], p[2 * self.active + 1])
    }

    fn embed_state_jacobian(&self, x: &DVector<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.model.dim();
        let (id, ib) = self.model.product_indices();
        let mut j = DMatrix::zeros(n + 1, n + 1);
        j.view_mut((0, 0), (n, n)).copy_from(a);
        j[(n, id)] += 2.0 * self.spec.objective_scale * (x[id] - self.spec.sp_d);
        j[(n, ib)] += 2.0 * self.spec.objective_scale * (x[ib] - self.spec.sp_b);
        j
    }

    fn embed_input_jacobian(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.model.dim();
        let mut j = DMatrix::zeros(n + 1, 2 * self.spec.n);
        j.view_mut((0, 2 * self.active), (n, 2)).copy_from(b);
        j
    }
}

impl OdeSystem for ShootingOde<'_> {
    fn dim(&self) -> usize {
        self.model.dim() + 1
    }
    fn n_params(&self) -> usize {
        2 * self.spec.n
    }
    fn rhs(&self, _t: f64, z: &DVector<f64>, p: &[f64]) -> Result<DVector<f64>> {
        let n = self.model.dim();
        let (l, v) = self.flows(p);
        let x = z.rows(0, n).into_owned();
        let f = self.model.rhs(&x, l, v)?;
        let (id, ib) = self.model.product_indices();
        let ed = x[id] - self.spec.sp_d;
        let eb = x[ib] - self.spec.sp_b;
        let mut out = DVector::zeros(n + 1);
        out.rows_mut(0, n).copy_from(&f);
        out[n] = self.spec.objective_scale * (ed * ed + eb * eb);
        Ok(out)
    }
    fn jacobian(&self, _t: f64, z: &DVector<f64>, p: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.model.dim();
        let (l, v) = self.flows(p);
        let x = z.rows(0, n).into_owned();
        let a = self.model.state_jacobian(&x, l, v)?;
        Ok(self.embed_state_jacobian(&x, &a))
    }
    fn param_jacobian(&self, _t: f64, z: &DVector<f64>, p: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.model.dim();
        let (l, v) = self.flows(p);
        let x = z.rows(0, n).into_owned();
        let b = self.model.input_jacobian(&x, l, v)?;
        Ok(self.embed_input_jacobian(&b))
    }
    fn jacobians(&self, _t: f64, z: &DVector<f64>, p: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.model.dim();
        let (l, v) = self.flows(p);
        let x = z.rows(0, n).into_owned();
        let (a, b) = self.model.jacobians(&x, l, v)?;
        Ok((self.embed_state_jacobian(&x, &a), self.embed_input_jacobian(&b)))
    }
}

/// Segments of the prediction horizon: (start, end, active move).
fn segments(spec: &OcpSpec) -> Vec<(f64, f64, usize)> {
    let dt = spec.interval();
    let mut s: Vec<(f64, f64, usize)> = (0..spec.n)
        .map(|k| (k as f64 * dt, (k + 1) as f64 * dt, k))
        .collect();
    if spec.t_p > spec.t_c * (1.0 + 1e-12) {
        s.push((spec.t_c, spec.t_p, spec.n - 1));
    }
    s
}

fn shoot(
    moves: &ControlMoves,
    x0: &DVector<f64>,
    model: &dyn ControllerModel,
    spec: &OcpSpec,
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = model.dim();
    if x0.len() != n {
        return Err(Error::InvalidParams(format!(
            "initial state has {} entries, model has {n}",
            x0.len()
        )));
    }
    if moves.0.len() != spec.n {
        return Err(Error::InvalidParams("move count differs from the control intervals".into()));
    }
    let params = moves.flat();
    let mut z = DVector::zeros(n + 1);
    z.rows_mut(0, n).copy_from(x0);
    let mut sens: Option<DMatrix<f64>> = if with_gradient {
        Some(DMatrix::zeros(n + 1, 2 * spec.n))
    } else {
        None
    };
    let mut tol = vec![spec.abs_tol; n + 1];
    // the quadrature is O(1) after scaling
    tol[n] = spec.rel_tol;
    let mut h0 = None;
    for (t0, t1, active) in segments(spec) {
        let ode = ShootingOde { model, spec, active };
        let prob = IvpProblem {
            system: &ode,
            initial_state: z.clone(),
            params: params.clone(),
            time_grid: vec![t0, t1],
            rel_tol: spec.rel_tol,
            abs_tol: Tolerance::PerComponent(tol.clone()),
            initial_sensitivity: sens.clone(),
            initial_step: h0,
            max_steps: 50_000,
        };
        let traj = if with_gradient {
            integrate_with_sensitivities(&prob)?
        } else {
            integrate(&prob)?
        };
        z = traj.final_state().clone();
        if with_gradient {
            sens = traj.final_sensitivity().cloned();
        }
        h0 = Some(traj.next_step);
    }
    let scaled = z[n];
    let grad = sens.map(|s| s.row(n).iter().copied().collect());
    Ok((scaled, grad))
}

/// Tracking objective over the prediction horizon and its gradient with
/// respect to the flattened moves `(L_1, V_1, ..., L_N, V_N)`.
pub fn objective_and_gradient(
    moves: &ControlMoves,
    x0: &DVector<f64>,
    model: &dyn ControllerModel,
    spec: &OcpSpec,
) -> Result<(f64, Vec<f64>)> {
    let (scaled, grad) = shoot(moves, x0, model, spec, true)?;
    let g = grad.expect("requested").iter().map(|v| v / spec.objective_scale).collect();
    Ok((scaled / spec.objective_scale, g))
}

/// Objective only.
pub fn objective(moves: &ControlMoves, x0: &DVector<f64>, model: &dyn ControllerModel, spec: &OcpSpec) -> Result<f64> {
    Ok(shoot(moves, x0, model, spec, false)?.0 / spec.objective_scale)
}

/// Scaled objective and gradient in normalized coordinates.
struct Evaluator<'a> {
    x0: &'a DVector<f64>,
    model: &'a dyn ControllerModel,
    spec: &'a OcpSpec,
    range: Vec<f64>,
    evaluations: usize,
}

impl Evaluator<'_> {
    fn value(&mut self, u: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let m = ControlMoves::from_normalized(u, self.spec);
        Ok(shoot(&m, self.x0, self.model, self.spec, false)?.0)
    }

    fn value_and_grad(&mut self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluations += 1;
        let m = ControlMoves::from_normalized(u, self.spec);
        let (f, g) = shoot(&m, self.x0, self.model, self.spec, true)?;
        let g = g.expect("requested").iter().zip(&self.range).map(|(a, b)| a * b).collect();
        Ok((f, g))
    }
}

fn projected_gradient_norm(u: &[f64], g: &[f64]) -> f64 {
    u.iter()
        .zip(g)
        .map(|(&ui, &gi)| (ui - (ui - gi).clamp(0.0, 1.0)).abs())
        .fold(0.0, f64::max)
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 20;
/// Largest normalized move of a steepest-descent step.
const FIRST_STEP: f64 = 0.1;

/// Bound-constrained projected BFGS with Armijo backtracking, started from
/// `warm_start`. Only improving iterates are accepted; the best one is returned.
pub fn solve_ocp(
    x0: &DVector<f64>,
    model: &dyn ControllerModel,
    spec: &OcpSpec,
    warm_start: &ControlMoves,
) -> Result<OcpSolution> {
    spec.validate()?;
    let start = Instant::now();
    let np = 2 * spec.n;
    let range: Vec<f64> = (0..spec.n)
        .flat_map(|_| [spec.bounds_l.1 - spec.bounds_l.0, spec.bounds_v.1 - spec.bounds_v.0])
        .collect();
    let mut ev = Evaluator {
        x0,
        model,
        spec,
        range,
        evaluations: 0,
    };
    let mut u = warm_start.to_normalized(spec);
    if u.len() != np {
        return Err(Error::InvalidParams("warm start has the wrong number of moves".into()));
    }
    let (mut f, mut g) = ev.value_and_grad(&u)?;
    let mut history = vec![f / spec.objective_scale];
    let mut h_inv: Option<DMatrix<f64>> = None;
    let mut iterations = 0;
    let status = loop {
        if projected_gradient_norm(&u, &g) <= spec.pg_tol {
            break SolveStatus::Optimal;
        }
        if iterations >= spec.max_iterations {
            break SolveStatus::IterationLimit;
        }
        if ev.evaluations >= spec.max_evaluations {
            break SolveStatus::Budget;
        }
        iterations += 1;
        // variables held at a bound by the gradient
        let free: Vec<bool> = (0..np)
            .map(|i| !((u[i] <= 0.0 && g[i] > 0.0) || (u[i] >= 1.0 && g[i] < 0.0)))
            .collect();
        let gv = DVector::from_iterator(np, (0..np).map(|i| if free[i] { g[i] } else { 0.0 }));
        let mut d = match &h_inv {
            Some(h) => {
                let mut d = -(h * &gv);
                for i in 0..np {
                    if !free[i] {
                        d[i] = 0.0;
                    }
                }
                d
            }
            None => DVector::zeros(np),
        };
        if h_inv.is_none() || d.dot(&gv) >= 0.0 {
            h_inv = None;
            let gmax = gv.amax();
            d = -&gv * (FIRST_STEP / gmax.max(1e-300));
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            if ev.evaluations >= spec.max_evaluations {
                break;
            }
            let trial: Vec<f64> = (0..np).map(|i| (u[i] + alpha * d[i]).clamp(0.0, 1.0)).collect();
            let decrease: f64 = (0..np).map(|i| g[i] * (trial[i] - u[i])).sum();
            if let Ok(ft) = ev.value(&trial) {
                if ft.is_finite() && ft <= f + ARMIJO_C1 * decrease && ft < f {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((un, fn_)) = accepted else {
            if h_inv.is_some() {
                // retry once from steepest descent before giving up
                h_inv = None;
                continue;
            }
            break if ev.evaluations >= spec.max_evaluations {
                SolveStatus::Budget
            } else {
                SolveStatus::LineSearchFailed
            };
        };
        let (fg, gn) = match ev.value_and_grad(&un) {
            Ok(r) => r,
            Err(_) => break SolveStatus::LineSearchFailed,
        };
        debug_assert!(fg <= fn_ * (1.0 + 1e-12) + 1e-300);
        let s = DVector::from_iterator(np, (0..np).map(|i| un[i] - u[i]));
        let y = DVector::from_iterator(np, (0..np).map(|i| gn[i] - g[i]));
        let sy = s.dot(&y);
        let decrease = f - fg;
        u = un;
        f = fg;
        g = gn;
        history.push(f / spec.objective_scale);
        if sy > 1e-12 * s.norm() * y.norm() {
            let mut h = h_inv.take().unwrap_or_else(|| DMatrix::identity(np, np) * (sy / y.dot(&y)));
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            h_inv = Some(h);
        }
        if decrease <= spec.decrease_tol {
            break SolveStatus::Stalled;
        }
    };
    let moves = ControlMoves::from_normalized(&u, spec);
    Ok(OcpSolution {
        moves,
        objective: f / spec.objective_scale,
        gradient_norm: projected_gradient_norm(&u, &g),
        iterations,
        evaluations: ev.evaluations,
        wall_time_s: start.elapsed().as_secs_f64(),
        status,
        history,
    })
}
