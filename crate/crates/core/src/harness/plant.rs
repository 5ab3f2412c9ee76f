//! Full-order plant replacement with piecewise constant input schedules.

use nalgebra::{DMatrix, DVector};

use crate::column::{full_jacobian, full_rhs, ColumnInputs, ColumnParams, PlantState};
use crate::error::{Error, Result};
use crate::integrator::{integrate, IvpProblem, OdeSystem, Tolerance};

/// Left-continuous step signal: the value of a step at time `t_k` holds on `(t_k, t_{k+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    pub initial: f64,
    steps: Vec<(f64, f64)>,
}

impl PiecewiseConstant {
    pub fn new(initial: f64) -> Self {
        PiecewiseConstant { initial, steps: Vec::new() }
    }

    /// Adds a step at `t`; steps must be added in increasing time order.
    /// A step at the time of the last one replaces it.
    pub fn push(&mut self, t: f64, value: f64) {
        match self.steps.last_mut() {
            Some(last) if last.0 == t => last.1 = value,
            Some(last) => {
                assert!(t > last.0, "steps out of order");
                self.steps.push((t, value));
            }
            None => self.steps.push((t, value)),
        }
    }

    /// Value at `t` (left limit at a step).
    pub fn at(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|s| s.0 < t);
        if k == 0 {
            self.initial
        } else {
            self.steps[k - 1].1
        }
    }

    /// Value just after `t`.
    pub fn after(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|s| s.0 <= t);
        if k == 0 {
            self.initial
        } else {
            self.steps[k - 1].1
        }
    }

    /// Step times in the open interval `(a, b)`.
    pub fn breakpoints(&self, a: f64, b: f64) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.0).filter(move |&t| t > a && t < b)
    }
}

struct PlantOde<'a> {
    params: &'a ColumnParams,
    l: &'a PiecewiseConstant,
    v: &'a PiecewiseConstant,
    x_f: &'a PiecewiseConstant,
}

impl PlantOde<'_> {
    fn inputs(&self, t: f64) -> ColumnInputs {
        ColumnInputs::new(self.l.at(t), self.v.at(t), self.params.feed_flow, self.x_f.at(t))
    }
}

impl OdeSystem for PlantOde<'_> {
    fn dim(&self) -> usize {
        self.params.n_total
    }
    fn n_params(&self) -> usize {
        0
    }
    fn rhs(&self, t: f64, x: &DVector<f64>, _p: &[f64]) -> Result<DVector<f64>> {
        full_rhs(x, &self.inputs(t), self.params)
    }
    fn jacobian(&self, t: f64, x: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(full_jacobian(x, &self.inputs(t), self.params))
    }
    fn param_jacobian(&self, _t: f64, _x: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(self.params.n_total, 0))
    }
}

/// Product compositions logged inside a period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductSample {
    pub t: f64,
    pub x_d: f64,
    pub x_b: f64,
}

#[derive(Debug, Clone)]
pub struct Plant {
    pub params: ColumnParams,
    pub t: f64,
    pub state: PlantState,
    pub l: PiecewiseConstant,
    pub v: PiecewiseConstant,
    pub x_f: PiecewiseConstant,
    pub rel_tol: f64,
    pub abs_tol: f64,
    next_step: Option<f64>,
    /// Integrator calls so far.
    pub calls: usize,
}

impl Plant {
    pub fn new(params: ColumnParams, state: PlantState, l: f64, v: f64, x_f: PiecewiseConstant) -> Self {
        Plant {
            params,
            t: 0.0,
            state,
            l: PiecewiseConstant::new(l),
            v: PiecewiseConstant::new(v),
            x_f,
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            next_step: None,
            calls: 0,
        }
    }

    /// Sets the flows applied from now on.
    pub fn apply(&mut self, l: f64, v: f64) {
        self.l.push(self.t, l);
        self.v.push(self.t, v);
    }

    /// Advances the plant to `t_end` with a single integrator call. The grid
    /// contains every schedule step and `log_points` equidistant points, so the
    /// returned product log includes both ends and each switch time.
    pub fn advance(&mut self, t_end: f64, log_points: usize) -> Result<Vec<ProductSample>> {
        if !(t_end > self.t) {
            return Err(Error::Integration { t: self.t, reason: format!("cannot advance to {t_end}") });
        }
        let t0 = self.t;
        let k = log_points.max(1);
        let mut grid: Vec<f64> = (0..=k).map(|i| t0 + (t_end - t0) * i as f64 / k as f64).collect();
        grid[k] = t_end;
        grid.extend(self.l.breakpoints(t0, t_end));
        grid.extend(self.v.breakpoints(t0, t_end));
        grid.extend(self.x_f.breakpoints(t0, t_end));
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let ode = PlantOde { params: &self.params, l: &self.l, v: &self.v, x_f: &self.x_f };
        let mut prob = IvpProblem::new(&ode, self.state.clone(), vec![], grid);
        prob.rel_tol = self.rel_tol;
        prob.abs_tol = Tolerance::Scalar(self.abs_tol);
        prob.initial_step = self.next_step;
        prob.max_steps = 100_000;
        let traj = integrate(&prob)?;
        self.calls += 1;
        self.next_step = Some(traj.next_step);
        let n = self.params.n_total;
        let log = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(&t, x)| ProductSample { t, x_d: x[n - 1], x_b: x[0] })
            .collect();
        self.state = traj.final_state().clone();
        self.t = t_end;
        Ok(log)
    }

    pub fn products(&self) -> ProductSample {
        ProductSample { t: self.t, x_d: self.state[self.params.n_total - 1], x_b: self.state[0] }
    }
}

/// Tracking-error integrand of the control objective.
pub fn deviation(s: &ProductSample, sp_d: f64, sp_b: f64) -> f64 {
    (s.x_d - sp_d).powi(2) + (s.x_b - sp_b).powi(2)
}

/// Trapezoidal integral of the tracking error over a product log.
pub fn trapezoid(log: &[ProductSample], sp_d: f64, sp_b: f64) -> f64 {
    log.windows(2)
        .map(|w| 0.5 * (w[1].t - w[0].t) * (deviation(&w[0], sp_d, sp_b) + deviation(&w[1], sp_d, sp_b)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::column::steady_state_solve;

    #[test]
    fn schedule_is_left_continuous() {
        let mut s = PiecewiseConstant::new(1.0);
        s.push(10.0, 2.0);
        s.push(20.0, 3.0);
        assert_eq!(s.at(10.0), 1.0);
        assert_eq!(s.after(10.0), 2.0);
        assert_eq!(s.at(10.5), 2.0);
        assert_eq!(s.at(25.0), 3.0);
        assert_eq!(s.breakpoints(0.0, 20.0).collect::<Vec<_>>(), vec![10.0]);
        s.push(20.0, 4.0);
        assert_eq!(s.at(21.0), 4.0);
    }

    #[test]
    fn steady_plant_stays_put() {
        let p = ColumnParams::default();
        let u = ColumnInputs::new(2.0, 2.4, p.feed_flow, 0.32);
        let x = steady_state_solve(&u, &p).unwrap();
        let mut plant = Plant::new(p, x.clone(), 2.0, 2.4, PiecewiseConstant::new(0.32));
        for k in 1..=3 {
            let log = plant.advance(60.0 * k as f64, 4).unwrap();
            assert_eq!(log.len(), 5);
        }
        assert_eq!(plant.calls, 3);
        assert!((&plant.state - &x).amax() < 1e-9);
    }

    #[test]
    fn switch_times_enter_the_log() {
        let p = ColumnParams::default();
        let u = ColumnInputs::new(2.0, 2.4, p.feed_flow, 0.32);
        let x = steady_state_solve(&u, &p).unwrap();
        let mut xf = PiecewiseConstant::new(0.32);
        xf.push(30.5, 0.4);
        let mut plant = Plant::new(p, x, 2.0, 2.4, xf);
        let log = plant.advance(60.0, 2).unwrap();
        let times: Vec<f64> = log.iter().map(|s| s.t).collect();
        assert_eq!(times, vec![0.0, 30.0, 30.5, 60.0]);
    }

    #[test]
    fn trapezoid_of_constant_deviation() {
        let log: Vec<_> = (0..5).map(|i| ProductSample { t: 10.0 * i as f64, x_d: 0.9, x_b: 0.1 }).collect();
        let phi = trapezoid(&log, 1.0, 0.0);
        assert!((phi - 40.0 * 0.02).abs() < 1e-15);
    }
}
