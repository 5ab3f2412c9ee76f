//! Stiff initial-value integration with forward parametric sensitivities.
//!
//! The scheme is the five-stage, L-stable, stiffly accurate SDIRK method of
//! order 4 with an embedded order-3 solution (Hairer & Wanner, Solving ODEs
//! II, table 6.5). Stage equations are solved by Newton's method with the
//! iteration matrix `I - h*gamma*J`.
//!
//! Sensitivities are propagated stage by stage with the same stage formula
//! applied to the variational equations, using the exact Jacobian at each
//! converged stage value. For a fixed step sequence this is the exact
//! derivative of the discrete solution, which keeps single-shooting gradients
//! consistent with the objective values the optimizer sees.
//!
//! Output times are hit exactly and never stepped across, so a system whose
//! right-hand side is piecewise constant in time may switch at grid points:
//! all stage times of a step lie in `(t_n, t_n + h]`.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};

const GAMMA: f64 = 0.25;
/// Estimated Newton error (weighted norm) that ends the stage iteration.
const NEWTON_TOL: f64 = 1e-3;
const MAX_NEWTON: usize = 8;
const STAGES: usize = 5;
const C: [f64; STAGES] = [0.25, 0.75, 11.0 / 20.0, 0.5, 1.0];
const A: [[f64; STAGES]; STAGES] = [
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.25, 0.0, 0.0, 0.0],
    [17.0 / 50.0, -1.0 / 25.0, 0.25, 0.0, 0.0],
    [371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0, 0.25, 0.0],
    [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
];
// b - b_hat, with b equal to the last row of A
const E: [f64; STAGES] = [
    25.0 / 24.0 - 59.0 / 48.0,
    -49.0 / 48.0 + 17.0 / 96.0,
    125.0 / 16.0 - 225.0 / 32.0,
    0.0,
    0.25,
];

/// An ODE `dx/dt = f(t, x, p)` with analytic Jacobians.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn rhs(&self, t: f64, x: &DVector<f64>, p: &[f64]) -> Result<DVector<f64>>;
    /// `dim x dim` matrix df/dx.
    fn jacobian(&self, t: f64, x: &DVector<f64>, p: &[f64]) -> Result<DMatrix<f64>>;
    /// `dim x n_params` matrix df/dp.
    fn param_jacobian(&self, t: f64, x: &DVector<f64>, p: &[f64]) -> Result<DMatrix<f64>>;
    /// Both Jacobians at one point; override when they share work.
    fn jacobians(&self, t: f64, x: &DVector<f64>, p: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.jacobian(t, x, p)?, self.param_jacobian(t, x, p)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tolerance {
    Scalar(f64),
    PerComponent(Vec<f64>),
}

impl Tolerance {
    fn get(&self, i: usize) -> f64 {
        match self {
            Tolerance::Scalar(v) => *v,
            Tolerance::PerComponent(v) => v[i],
        }
    }
}

pub struct IvpProblem<'a> {
    pub system: &'a dyn OdeSystem,
    pub initial_state: DVector<f64>,
    pub params: Vec<f64>,
    /// Strictly increasing times; the first entry is the initial time.
    pub time_grid: Vec<f64>,
    pub rel_tol: f64,
    pub abs_tol: Tolerance,
    /// d x(t0) / d p; zero when absent.
    pub initial_sensitivity: Option<DMatrix<f64>>,
    pub initial_step: Option<f64>,
    pub max_steps: usize,
}

impl<'a> IvpProblem<'a> {
    pub fn new(system: &'a dyn OdeSystem, x0: DVector<f64>, params: Vec<f64>, time_grid: Vec<f64>) -> Self {
        IvpProblem {
            system,
            initial_state: x0,
            params,
            time_grid,
            rel_tol: 1e-8,
            abs_tol: Tolerance::Scalar(1e-10),
            initial_sensitivity: None,
            initial_step: None,
            max_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub newton_failures: usize,
    pub rhs_evals: usize,
    pub jacobian_evals: usize,
    pub factorizations: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub sensitivities: Option<Vec<DMatrix<f64>>>,
    pub stats: StepStats,
    /// Step size the controller would have tried next.
    pub next_step: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_sensitivity(&self) -> Option<&DMatrix<f64>> {
        self.sensitivities.as_ref().and_then(|s| s.last())
    }
}

pub fn integrate(problem: &IvpProblem) -> Result<Trajectory> {
    Integrator::new(problem, false)?.run()
}

/// Integrates the states together with d x / d p.
pub fn integrate_with_sensitivities(problem: &IvpProblem) -> Result<Trajectory> {
    Integrator::new(problem, true)?.run()
}

struct Integrator<'p, 'a> {
    prob: &'p IvpProblem<'a>,
    with_sens: bool,
    n: usize,
    np: usize,
    stats: StepStats,
}

struct StepResult {
    x: DVector<f64>,
    sens: Option<DMatrix<f64>>,
    err: f64,
}

enum StepFailure {
    Newton,
    Fatal(Error),
}

impl<'p, 'a> Integrator<'p, 'a> {
    fn new(prob: &'p IvpProblem<'a>, with_sens: bool) -> Result<Self> {
        let n = prob.system.dim();
        let np = prob.system.n_params();
        if prob.initial_state.len() != n {
            return Err(Error::Integration {
                t: prob.time_grid.first().copied().unwrap_or(0.0),
                reason: format!("initial state has {} entries, system has {n}", prob.initial_state.len()),
            });
        }
        if prob.time_grid.len() < 2 || prob.time_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Integration {
                t: 0.0,
                reason: "time grid must hold at least two strictly increasing times".into(),
            });
        }
        if !(prob.rel_tol > 0.0) {
            return Err(Error::Integration { t: 0.0, reason: "relative tolerance must be positive".into() });
        }
        if let Tolerance::PerComponent(v) = &prob.abs_tol {
            if v.len() != n || v.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Integration { t: 0.0, reason: "bad absolute tolerance vector".into() });
            }
        } else if !(prob.abs_tol.get(0) > 0.0) {
            return Err(Error::Integration { t: 0.0, reason: "absolute tolerance must be positive".into() });
        }
        if let Some(s0) = &prob.initial_sensitivity {
            if s0.nrows() != n || s0.ncols() != np {
                return Err(Error::Integration { t: 0.0, reason: "initial sensitivity has wrong shape".into() });
            }
        }
        Ok(Integrator { prob, with_sens, n, np, stats: StepStats::default() })
    }

    fn weights(&self, x: &DVector<f64>, x_new: &DVector<f64>) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.prob.abs_tol.get(i) + self.prob.rel_tol * x[i].abs().max(x_new[i].abs()))
            .collect()
    }

    fn wrms(v: &DVector<f64>, w: &[f64]) -> f64 {
        let s: f64 = v.iter().zip(w).map(|(vi, wi)| (vi / wi).powi(2)).sum();
        (s / v.len().max(1) as f64).sqrt()
    }

    fn rhs(&mut self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.stats.rhs_evals += 1;
        self.prob.system.rhs(t, x, &self.prob.params)
    }

    fn iteration_matrix(&mut self, t: f64, x: &DVector<f64>, h: f64) -> Result<(DMatrix<f64>, LU<f64, nalgebra::Dyn, nalgebra::Dyn>)> {
        self.stats.jacobian_evals += 1;
        self.stats.factorizations += 1;
        let jac = self.prob.system.jacobian(t, x, &self.prob.params)?;
        Ok(self.factorize(jac, h))
    }

    fn factorize(&mut self, jac: DMatrix<f64>, h: f64) -> (DMatrix<f64>, LU<f64, nalgebra::Dyn, nalgebra::Dyn>) {
        let m = DMatrix::identity(self.n, self.n) - &jac * (h * GAMMA);
        (jac, m.lu())
    }

    fn initial_step(&mut self, t0: f64, x0: &DVector<f64>, span: f64) -> Result<f64> {
        if let Some(h) = self.prob.initial_step {
            return Ok(h.min(span));
        }
        let f0 = self.rhs(t0, x0)?;
        let w = self.weights(x0, x0);
        let d0 = Self::wrms(x0, &w);
        let d1 = Self::wrms(&f0, &w);
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 * span.max(1.0) } else { 0.01 * d0 / d1 };
        Ok(h.min(span))
    }

    fn run(mut self) -> Result<Trajectory> {
        let grid = &self.prob.time_grid;
        let mut t = grid[0];
        let mut x = self.prob.initial_state.clone();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { t, reason: "non-finite initial state".into() });
        }
        let f0 = self.rhs(t, &x)?;
        if f0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { t, reason: "non-finite right-hand side at the initial state".into() });
        }
        let mut sens = if self.with_sens {
            Some(
                self.prob
                    .initial_sensitivity
                    .clone()
                    .unwrap_or_else(|| DMatrix::zeros(self.n, self.np)),
            )
        } else {
            None
        };
        let mut times = vec![t];
        let mut states = vec![x.clone()];
        let mut sens_out = sens.as_ref().map(|s| vec![s.clone()]);
        let mut h = self.initial_step(t, &x, grid[1] - grid[0])?;
        let mut steps = 0usize;
        let mut last_rejected = false;

        for &t_out in &grid[1..] {
            while t < t_out {
                if steps >= self.prob.max_steps {
                    return Err(Error::Integration { t, reason: format!("exceeded {} steps", self.prob.max_steps) });
                }
                steps += 1;
                let remaining = t_out - t;
                let mut h_try = h;
                let hits = h_try * 1.05 >= remaining;
                if hits {
                    h_try = remaining;
                }
                if h_try <= 1e-13 * t.abs().max(1.0) {
                    return Err(Error::StepSizeUnderflow { t, h: h_try });
                }
                let t_end = if hits { t_out } else { t + h_try };
                match self.step(t, t_end, &x, sens.as_ref(), h_try) {
                    Ok(res) => {
                        if res.err <= 1.0 {
                            self.stats.accepted += 1;
                            t = t_end;
                            if res.x.iter().any(|v| !v.is_finite()) {
                                return Err(Error::Integration { t, reason: "non-finite state".into() });
                            }
                            x = res.x;
                            sens = res.sens;
                            let fac = (0.9 * res.err.max(1e-10).powf(-0.25)).clamp(0.2, 4.0);
                            let fac = if last_rejected { fac.min(1.0) } else { fac };
                            last_rejected = false;
                            // a step clipped to the grid says little about the natural step
                            h = if hits { h.max(h_try * fac) } else { h_try * fac };
                        } else {
                            self.stats.rejected += 1;
                            last_rejected = true;
                            let fac = (0.9 * res.err.powf(-0.25)).clamp(0.1, 0.9);
                            h = h_try * fac;
                        }
                    }
                    Err(StepFailure::Newton) => {
                        self.stats.newton_failures += 1;
                        last_rejected = true;
                        h = h_try * 0.25;
                    }
                    Err(StepFailure::Fatal(e)) => return Err(e),
                }
            }
            times.push(t);
            states.push(x.clone());
            if let (Some(out), Some(s)) = (sens_out.as_mut(), sens.as_ref()) {
                out.push(s.clone());
            }
        }
        Ok(Trajectory { times, states, sensitivities: sens_out, stats: self.stats, next_step: h })
    }

    fn step(
        &mut self,
        t: f64,
        t_end: f64,
        x: &DVector<f64>,
        sens: Option<&DMatrix<f64>>,
        h: f64,
    ) -> std::result::Result<StepResult, StepFailure> {
        let fatal = StepFailure::Fatal;
        // the Newton matrix is shared by all stages whether or not sensitivities
        // are requested, so states do not depend on the sensitivity switch
        let (_, lu) = self.iteration_matrix(t, x, h).map_err(fatal)?;
        let mut stage_x: Vec<DVector<f64>> = Vec::with_capacity(STAGES);
        let mut stage_f: Vec<DVector<f64>> = Vec::with_capacity(STAGES);
        let mut stage_k: Vec<DMatrix<f64>> = Vec::with_capacity(STAGES);
        let w = self.weights(x, x);
        let mut last_dx = None;

        for i in 0..STAGES {
            // the last stage sits exactly on the step end, never past an output time
            let ti = if i == STAGES - 1 { t_end } else { t + C[i] * h };
            let mut known = x.clone();
            for j in 0..i {
                known.axpy(h * A[i][j], &stage_f[j], 1.0);
            }
            // predictor: explicit continuation of the previous stage slope
            let mut xi = match stage_f.last() {
                Some(fp) => {
                    let mut g = known.clone();
                    g.axpy(h * GAMMA, fp, 1.0);
                    g
                }
                None => x.clone(),
            };
            let mut converged = false;
            let mut prev_norm = f64::INFINITY;
            for it in 0..MAX_NEWTON {
                let fi = match self.rhs(ti, &xi) {
                    Ok(f) if f.iter().all(|v| v.is_finite()) => f,
                    Ok(_) => return Err(StepFailure::Newton),
                    Err(Error::NonFinite(_)) => return Err(StepFailure::Newton),
                    Err(e) => return Err(fatal(e)),
                };
                let g = &xi - &known - fi * (h * GAMMA);
                let delta = match lu.solve(&(-g)) {
                    Some(d) => d,
                    None => return Err(StepFailure::Newton),
                };
                xi += &delta;
                let dn = Self::wrms(&delta, &w);
                if !dn.is_finite() || dn > 2.0 * prev_norm {
                    return Err(StepFailure::Newton);
                }
                // contraction-rate estimate of the remaining error
                let remaining = if it == 0 {
                    dn
                } else {
                    let theta = dn / prev_norm;
                    if theta >= 1.0 {
                        f64::INFINITY
                    } else {
                        dn * theta / (1.0 - theta)
                    }
                };
                prev_norm = dn;
                if dn <= NEWTON_TOL || remaining <= NEWTON_TOL {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(StepFailure::Newton);
            }
            // stage slope from the stage equation; equals f(t_i, x_i) at convergence
            let fi = (&xi - &known) / (h * GAMMA);
            if let Some(s0) = sens {
                self.stats.jacobian_evals += 1;
                self.stats.factorizations += 1;
                let (jac, fp) = self.prob.system.jacobians(ti, &xi, &self.prob.params).map_err(fatal)?;
                let (jac, lu_i) = self.factorize(jac, h);
                let mut rhs_s = s0.clone();
                for j in 0..i {
                    rhs_s += &stage_k[j] * (h * A[i][j]);
                }
                rhs_s += &fp * (h * GAMMA);
                let dxi = match lu_i.solve(&rhs_s) {
                    Some(d) => d,
                    None => return Err(StepFailure::Newton),
                };
                stage_k.push(&jac * &dxi + fp);
                last_dx = Some(dxi);
            }
            stage_x.push(xi);
            stage_f.push(fi);
        }
        let x_new = stage_x.pop().unwrap();
        let err = self.error_norm(x, &x_new, &stage_f, h, &lu)?;
        Ok(StepResult { x: x_new, sens: last_dx, err })
    }

    fn error_norm(
        &self,
        x: &DVector<f64>,
        x_new: &DVector<f64>,
        f: &[DVector<f64>],
        h: f64,
        lu0: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    ) -> std::result::Result<f64, StepFailure> {
        let mut e = DVector::zeros(self.n);
        for (fj, ej) in f.iter().zip(E) {
            e.axpy(h * ej, fj, 1.0);
        }
        // filter through the iteration matrix to keep the estimate bounded for stiff components
        let e = lu0.solve(&e).ok_or(StepFailure::Newton)?;
        let w = self.weights(x, x_new);
        let n = Self::wrms(&e, &w);
        if n.is_finite() {
            Ok(n)
        } else {
            Err(StepFailure::Newton)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dx/dt = p0 * x, scalar.
    struct Growth;
    impl OdeSystem for Growth {
        fn dim(&self) -> usize { 1 }
        fn n_params(&self) -> usize { 2 }
        fn rhs(&self, _t: f64, x: &DVector<f64>, p: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::from_element(1, p[0] * x[0]))
        }
        fn jacobian(&self, _t: f64, _x: &DVector<f64>, p: &[f64]) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, p[0]))
        }
        fn param_jacobian(&self, _t: f64, x: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
            // second parameter is ignored by the right-hand side
            Ok(DMatrix::from_row_slice(1, 2, &[x[0], 0.0]))
        }
    }

    /// Robertson's stiff chemical kinetics.
    struct Robertson;
    impl OdeSystem for Robertson {
        fn dim(&self) -> usize { 3 }
        fn n_params(&self) -> usize { 0 }
        fn rhs(&self, _t: f64, y: &DVector<f64>, _p: &[f64]) -> Result<DVector<f64>> {
            let a = -0.04 * y[0] + 1e4 * y[1] * y[2];
            let c = 3e7 * y[1] * y[1];
            Ok(DVector::from_vec(vec![a, -a - c, c]))
        }
        fn jacobian(&self, _t: f64, y: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_row_slice(3, 3, &[
                -0.04, 1e4 * y[2], 1e4 * y[1],
                0.04, -1e4 * y[2] - 6e7 * y[1], -1e4 * y[1],
                0.0, 6e7 * y[1], 0.0,
            ]))
        }
        fn param_jacobian(&self, _t: f64, _y: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
            Ok(DMatrix::zeros(3, 0))
        }
    }

    #[test]
    fn exponential_decay() {
        let sys = Growth;
        let mut prob = IvpProblem::new(&sys, DVector::from_element(1, 1.0), vec![-1.0, 0.0], vec![0.0, 1.0]);
        prob.rel_tol = 1e-8;
        prob.abs_tol = Tolerance::Scalar(1e-12);
        let traj = integrate(&prob).unwrap();
        assert!((traj.final_state()[0] - (-1.0f64).exp()).abs() <= 1e-7);
        assert_eq!(traj.times, vec![0.0, 1.0]);
    }

    #[test]
    fn growth_sensitivity_closed_form() {
        let sys = Growth;
        let p = 0.7;
        let mut prob = IvpProblem::new(&sys, DVector::from_element(1, 1.0), vec![p, 3.0], vec![0.0, 0.5, 1.0, 2.0]);
        prob.rel_tol = 1e-9;
        let traj = integrate_with_sensitivities(&prob).unwrap();
        for (t, s) in traj.times.iter().zip(traj.sensitivities.as_ref().unwrap()) {
            let exact = (p * t).exp() * t;
            assert!((s[(0, 0)] - exact).abs() <= 1e-6, "t={t}: {} vs {exact}", s[(0, 0)]);
            assert_eq!(s[(0, 1)], 0.0);
        }
    }

    #[test]
    fn fourth_order_convergence_with_fixed_steps() {
        // error ratio when halving a fixed step should approach 2^4
        let sys = Growth;
        let run = |h: f64| {
            let prob = IvpProblem::new(&sys, DVector::from_element(1, 1.0), vec![-2.0, 0.0], vec![0.0, 1.0]);
            let mut integ = Integrator::new(&prob, false).unwrap();
            let mut x = DVector::from_element(1, 1.0);
            let mut t = 0.0;
            while t < 1.0 - 1e-12 {
                x = match integ.step(t, t + h, &x, None, h) {
                    Ok(r) => r.x,
                    Err(_) => panic!(),
                };
                t += h;
            }
            (x[0] - (-2.0f64).exp()).abs()
        };
        let ratio = run(0.1) / run(0.05);
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn stiff_robertson_mass_conservation() {
        let sys = Robertson;
        let mut prob = IvpProblem::new(&sys, DVector::from_vec(vec![1.0, 0.0, 0.0]), vec![], vec![0.0, 40.0, 4e5]);
        prob.rel_tol = 1e-6;
        prob.abs_tol = Tolerance::PerComponent(vec![1e-8, 1e-14, 1e-8]);
        let traj = integrate(&prob).unwrap();
        let y = &traj.states[1];
        // reference values at t = 40 from the classical benchmark
        assert!((y[0] - 0.7158).abs() < 1e-3, "{y}");
        for s in &traj.states {
            assert!((s.sum() - 1.0).abs() < 1e-8);
        }
        assert!(traj.stats.accepted < 2000);
    }

    #[test]
    fn rejects_bad_grid() {
        let sys = Growth;
        let prob = IvpProblem::new(&sys, DVector::from_element(1, 1.0), vec![-1.0, 0.0], vec![0.0, 0.0]);
        assert!(integrate(&prob).is_err());
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let sys = Robertson;
        let prob = IvpProblem::new(&sys, DVector::from_vec(vec![1.0, 0.0, 0.0]), vec![], vec![0.0, 10.0]);
        let a = integrate(&prob).unwrap();
        let b = integrate(&prob).unwrap();
        assert_eq!(a.final_state().as_slice(), b.final_state().as_slice());
    }

    #[test]
    fn states_do_not_depend_on_the_sensitivity_switch() {
        let sys = Growth;
        let prob = IvpProblem::new(&sys, DVector::from_element(1, 1.0), vec![-0.7, 0.3], vec![0.0, 1.0, 3.0]);
        let a = integrate(&prob).unwrap();
        let b = integrate_with_sensitivities(&prob).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
        assert_eq!(a.stats.accepted, b.stats.accepted);
    }
}
