//! Tray-by-tray model of a binary distillation column with constant molar
//! overflow, ideal vapor-liquid equilibrium and constant holdups.
//!
//! Stages are numbered from the bottom: stage 1 is the reboiler and stage
//! `n_total` is the total condenser. Every state vector in this crate that
//! spans the whole column uses index `s - 1` for stage `s`.
//!
//! Besides the full-order model this module holds the stage-aggregation
//! reduction (aggregation stages with inflated holdup, zero-holdup trays in
//! between) and the exact steady-state solution of a zero-holdup section,
//! which is the function the section surrogates learn.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, IvpProblem, OdeSystem, Tolerance};

/// Physical and structural description of the column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnParams {
    /// Number of stages including condenser and reboiler.
    pub n_total: usize,
    /// Stage receiving the (saturated liquid) feed.
    pub feed_stage: usize,
    /// Relative volatility of the light component.
    pub alpha: f64,
    /// Molar holdup per stage (mol), index `s - 1` for stage `s`.
    pub holdups: Vec<f64>,
    /// Feed molar flow F (mol/s).
    pub feed_flow: f64,
    /// Nominal feed molar fraction.
    pub feed_comp_nominal: f64,
    /// Admissible reflux flow interval (mol/s).
    pub bounds_l: (f64, f64),
    /// Admissible boilup flow interval (mol/s).
    pub bounds_v: (f64, f64),
}

impl Default for ColumnParams {
    fn default() -> Self {
        Self::uniform(42, 21, 2.0, 4.0, 20.0, 20.0, 1.0, 0.32, (1.9, 2.15), (2.2, 2.6))
    }
}

impl ColumnParams {
    /// Column with one tray holdup and separate condenser/reboiler holdups.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        n_total: usize,
        feed_stage: usize,
        alpha: f64,
        tray_holdup: f64,
        condenser_holdup: f64,
        reboiler_holdup: f64,
        feed_flow: f64,
        feed_comp_nominal: f64,
        bounds_l: (f64, f64),
        bounds_v: (f64, f64),
    ) -> Self {
        let mut holdups = vec![tray_holdup; n_total];
        if n_total > 0 {
            holdups[0] = reboiler_holdup;
            holdups[n_total - 1] = condenser_holdup;
        }
        ColumnParams {
            n_total,
            feed_stage,
            alpha,
            holdups,
            feed_flow,
            feed_comp_nominal,
            bounds_l,
            bounds_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.n_total < 3 {
            return bad(format!("need at least 3 stages, got {}", self.n_total));
        }
        if self.feed_stage < 2 || self.feed_stage >= self.n_total {
            return bad(format!(
                "feed stage {} must be an interior stage of 1..={}",
                self.feed_stage, self.n_total
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("relative volatility must be positive, got {}", self.alpha));
        }
        if self.holdups.len() != self.n_total {
            return bad(format!(
                "{} holdups given for {} stages",
                self.holdups.len(),
                self.n_total
            ));
        }
        if self.holdups.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return bad("all holdups must be positive".into());
        }
        if !(self.feed_flow > 0.0 && self.feed_flow.is_finite()) {
            return bad("feed flow must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.feed_comp_nominal) {
            return bad("nominal feed composition outside [0, 1]".into());
        }
        let (l_lo, l_hi) = self.bounds_l;
        let (v_lo, v_hi) = self.bounds_v;
        if !(l_lo > 0.0 && l_lo <= l_hi && v_lo > 0.0 && v_lo <= v_hi) {
            return bad("flow bounds must be positive, ordered intervals".into());
        }
        // worst corners of the box for the two product flows
        if v_lo - l_hi <= 0.0 {
            return bad(format!(
                "distillate flow V - L can reach {} inside the bounds",
                v_lo - l_hi
            ));
        }
        if self.feed_flow + l_lo - v_hi <= 0.0 {
            return bad(format!(
                "bottoms flow F + L - V can reach {} inside the bounds",
                self.feed_flow + l_lo - v_hi
            ));
        }
        Ok(())
    }

    pub fn condenser(&self) -> usize {
        self.n_total
    }

    pub fn holdup(&self, stage: usize) -> f64 {
        self.holdups[stage - 1]
    }

    pub fn total_holdup(&self) -> f64 {
        self.holdups.iter().sum()
    }

    pub fn clamp_l(&self, l: f64) -> f64 {
        l.clamp(self.bounds_l.0, self.bounds_l.1)
    }

    pub fn clamp_v(&self, v: f64) -> f64 {
        v.clamp(self.bounds_v.0, self.bounds_v.1)
    }

    pub fn within_bounds(&self, l: f64, v: f64) -> bool {
        (self.bounds_l.0..=self.bounds_l.1).contains(&l)
            && (self.bounds_v.0..=self.bounds_v.1).contains(&v)
    }

    /// Liquid flow leaving stage `s` downwards (L above the feed, L + F from the feed down).
    pub(crate) fn liquid_out(&self, stage: usize, l: f64, f: f64) -> f64 {
        if stage > self.feed_stage {
            l
        } else {
            l + f
        }
    }

    /// Liquid flow entering stage `s` from above.
    pub(crate) fn liquid_in(&self, stage: usize, l: f64, f: f64) -> f64 {
        if stage >= self.feed_stage {
            l
        } else {
            l + f
        }
    }
}

/// Manipulated flows and feed conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnInputs {
    /// Reflux flow (mol/s).
    pub l: f64,
    /// Boilup flow (mol/s).
    pub v: f64,
    /// Feed flow (mol/s).
    pub f: f64,
    /// Feed molar fraction.
    pub x_f: f64,
}

impl ColumnInputs {
    pub fn new(l: f64, v: f64, f: f64, x_f: f64) -> Self {
        ColumnInputs { l, v, f, x_f }
    }

    pub fn distillate(&self) -> f64 {
        self.v - self.l
    }

    pub fn bottoms(&self) -> f64 {
        self.f + self.l - self.v
    }

    fn check(&self) -> Result<()> {
        if [self.l, self.v, self.f, self.x_f].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("column inputs"))
        }
    }
}

/// Liquid compositions of every stage of the full-order model.
pub type PlantState = DVector<f64>;

/// Equilibrium vapor composition for liquid composition `x`.
#[inline]
pub fn vapor_equilibrium(x: f64, alpha: f64) -> f64 {
    alpha * x / (1.0 + (alpha - 1.0) * x)
}

/// d y / d x of [`vapor_equilibrium`].
#[inline]
pub fn vapor_equilibrium_slope(x: f64, alpha: f64) -> f64 {
    let den = 1.0 + (alpha - 1.0) * x;
    alpha / (den * den)
}

/// Liquid composition in equilibrium with vapor composition `y`.
#[inline]
pub fn liquid_equilibrium(y: f64, alpha: f64) -> f64 {
    y / (alpha - (alpha - 1.0) * y)
}

fn check_state(x: &[f64], what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Molar component balance of stage `s` (mol/s), i.e. `n_s dx_s/dt`.
fn stage_balance(x: &[f64], y: &[f64], s: usize, u: &ColumnInputs, p: &ColumnParams) -> f64 {
    let n = p.n_total;
    let i = s - 1;
    if s == n {
        u.v * (y[i - 1] - x[i])
    } else if s == 1 {
        (u.l + u.f) * (x[1] - x[0]) + u.v * (x[0] - y[0])
    } else {
        let mut b = p.liquid_in(s, u.l, u.f) * x[i + 1] + u.v * y[i - 1]
            - p.liquid_out(s, u.l, u.f) * x[i]
            - u.v * y[i];
        if s == p.feed_stage {
            b += u.f * u.x_f;
        }
        b
    }
}

fn stage_balances(x: &[f64], u: &ColumnInputs, p: &ColumnParams) -> Vec<f64> {
    let y: Vec<f64> = x.iter().map(|&xi| vapor_equilibrium(xi, p.alpha)).collect();
    (1..=p.n_total).map(|s| stage_balance(x, &y, s, u, p)).collect()
}

/// Right-hand side of the full-order model, dx_i/dt for every stage.
pub fn full_rhs(x: &PlantState, u: &ColumnInputs, p: &ColumnParams) -> Result<PlantState> {
    check_state(x.as_slice(), "plant state")?;
    u.check()?;
    let b = stage_balances(x.as_slice(), u, p);
    Ok(DVector::from_iterator(
        p.n_total,
        b.iter().zip(&p.holdups).map(|(bi, ni)| bi / ni),
    ))
}

/// Jacobian d(dx/dt)/dx of the full-order model (tridiagonal, stored dense).
pub fn full_jacobian(x: &PlantState, u: &ColumnInputs, p: &ColumnParams) -> DMatrix<f64> {
    let n = p.n_total;
    let mut jac = DMatrix::zeros(n, n);
    let dy: Vec<f64> = x.iter().map(|&xi| vapor_equilibrium_slope(xi, p.alpha)).collect();
    for s in 1..=n {
        let i = s - 1;
        let inv = 1.0 / p.holdups[i];
        if s == n {
            jac[(i, i - 1)] = u.v * dy[i - 1] * inv;
            jac[(i, i)] = -u.v * inv;
        } else if s == 1 {
            jac[(0, 1)] = (u.l + u.f) * inv;
            jac[(0, 0)] = (-(u.l + u.f) + u.v * (1.0 - dy[0])) * inv;
        } else {
            jac[(i, i + 1)] = p.liquid_in(s, u.l, u.f) * inv;
            jac[(i, i - 1)] = u.v * dy[i - 1] * inv;
            jac[(i, i)] = (-p.liquid_out(s, u.l, u.f) - u.v * dy[i]) * inv;
        }
    }
    jac
}

/// Partial derivatives of dx/dt with respect to (L, V), an `n_total x 2` matrix.
pub fn full_input_jacobian(x: &PlantState, _u: &ColumnInputs, p: &ColumnParams) -> DMatrix<f64> {
    let n = p.n_total;
    let mut jac = DMatrix::zeros(n, 2);
    let y: Vec<f64> = x.iter().map(|&xi| vapor_equilibrium(xi, p.alpha)).collect();
    for s in 1..=n {
        let i = s - 1;
        let inv = 1.0 / p.holdups[i];
        if s == n {
            jac[(i, 1)] = (y[i - 1] - x[i]) * inv;
        } else if s == 1 {
            jac[(0, 0)] = (x[1] - x[0]) * inv;
            jac[(0, 1)] = (x[0] - y[0]) * inv;
        } else {
            jac[(i, 0)] = (x[i + 1] - x[i]) * inv;
            jac[(i, 1)] = (y[i - 1] - y[i]) * inv;
        }
    }
    jac
}

/// One section of zero-holdup trays between two consecutive aggregation stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Section {
    /// Aggregation stage above the section (receives its vapor).
    pub upper: usize,
    /// Aggregation stage below the section (receives its liquid).
    pub lower: usize,
    pub tray_count: usize,
    /// Liquid flow in the section is L + F (section below the feed).
    pub stripping: bool,
}

impl Section {
    /// Liquid-to-vapor flow ratio inside the section.
    pub fn flow_ratio(&self, l: f64, v: f64, f: f64) -> f64 {
        if self.stripping {
            (l + f) / v
        } else {
            l / v
        }
    }

    /// d r / d (L, V).
    pub fn flow_ratio_grad(&self, l: f64, v: f64, f: f64) -> (f64, f64) {
        let r = self.flow_ratio(l, v, f);
        (1.0 / v, -r / v)
    }
}

/// Stage-aggregation structure of the reduced model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationLayout {
    /// Aggregation stages in ascending order (reboiler first, condenser last).
    pub agg_stages: Vec<usize>,
    /// Holdup factor H per aggregation stage, same order as `agg_stages`.
    pub holdup_factors: Vec<f64>,
    /// Sections ordered from the top of the column downwards.
    pub sections: Vec<Section>,
}

impl AggregationLayout {
    /// Aggregation at reboiler, stages 14 and 28, the feed stage and the condenser.
    pub fn default_for(p: &ColumnParams) -> Result<Self> {
        let mut stages = vec![1, 14, p.feed_stage, 28, p.n_total];
        stages.sort_unstable();
        stages.dedup();
        Self::new(p, &stages)
    }

    /// Builds the layout, distributing each zero-holdup tray's holdup to the
    /// nearest aggregation stage (ties go to the stage above).
    pub fn new(p: &ColumnParams, agg_stages: &[usize]) -> Result<Self> {
        p.validate()?;
        let mut stages = agg_stages.to_vec();
        stages.sort_unstable();
        stages.dedup();
        if stages.len() != agg_stages.len() {
            return Err(Error::InvalidParams("duplicate aggregation stages".into()));
        }
        if stages.first() != Some(&1) || stages.last() != Some(&p.n_total) {
            return Err(Error::InvalidParams(
                "reboiler and condenser must be aggregation stages".into(),
            ));
        }
        if !stages.contains(&p.feed_stage) {
            return Err(Error::InvalidParams("the feed stage must be an aggregation stage".into()));
        }
        let mut assigned = vec![0.0; stages.len()];
        for s in 1..=p.n_total {
            if stages.contains(&s) {
                continue;
            }
            let above = stages.iter().position(|&a| a > s).expect("condenser is above");
            let below = above - 1;
            let d_above = stages[above] - s;
            let d_below = s - stages[below];
            let target = if d_above <= d_below { above } else { below };
            assigned[target] += p.holdup(s);
        }
        let holdup_factors = stages
            .iter()
            .zip(&assigned)
            .map(|(&a, &extra)| 1.0 + extra / p.holdup(a))
            .collect();
        let sections = stages
            .windows(2)
            .rev()
            .map(|w| Section {
                upper: w[1],
                lower: w[0],
                tray_count: w[1] - w[0] - 1,
                stripping: w[1] <= p.feed_stage,
            })
            .collect();
        Ok(AggregationLayout {
            agg_stages: stages,
            holdup_factors,
            sections,
        })
    }

    pub fn n_agg(&self) -> usize {
        self.agg_stages.len()
    }

    pub fn is_aggregation(&self, stage: usize) -> bool {
        self.agg_stages.contains(&stage)
    }

    /// Effective holdup H_i n_i of aggregation stage number `a` (ascending order).
    pub fn effective_holdup(&self, a: usize, p: &ColumnParams) -> f64 {
        self.holdup_factors[a] * p.holdup(self.agg_stages[a])
    }

    /// Extracts the aggregation-stage compositions from a full state.
    pub fn restrict(&self, x: &PlantState) -> DVector<f64> {
        DVector::from_iterator(self.n_agg(), self.agg_stages.iter().map(|&s| x[s - 1]))
    }

    pub fn validate(&self, p: &ColumnParams) -> Result<()> {
        let rebuilt = Self::new(p, &self.agg_stages)?;
        if rebuilt.sections != self.sections {
            return Err(Error::InvalidParams("sections do not match aggregation stages".into()));
        }
        let total: f64 = (0..self.n_agg()).map(|a| self.effective_holdup(a, p)).sum();
        if (total - p.total_holdup()).abs() > 1e-9 * p.total_holdup() {
            return Err(Error::InvalidParams(format!(
                "aggregated holdup {total} differs from column holdup {}",
                p.total_holdup()
            )));
        }
        Ok(())
    }
}

/// Output of [`reduced_rhs`].
#[derive(Debug, Clone)]
pub struct ReducedRhs {
    /// dx/dt at the aggregation stages (ascending stage order).
    pub derivatives: Vec<f64>,
    /// `(stage, residual)` of the algebraic balance at every zero-holdup stage.
    pub residuals: Vec<(usize, f64)>,
}

/// Reduced stage-aggregation model evaluated on a full composition vector.
pub fn reduced_rhs(
    x: &PlantState,
    u: &ColumnInputs,
    p: &ColumnParams,
    layout: &AggregationLayout,
) -> Result<ReducedRhs> {
    check_state(x.as_slice(), "plant state")?;
    u.check()?;
    let b = stage_balances(x.as_slice(), u, p);
    let mut derivatives = Vec::with_capacity(layout.n_agg());
    let mut residuals = Vec::new();
    let mut a = 0;
    for s in 1..=p.n_total {
        if layout.agg_stages.get(a) == Some(&s) {
            derivatives.push(b[s - 1] / layout.effective_holdup(a, p));
            a += 1;
        } else {
            residuals.push((s, b[s - 1]));
        }
    }
    Ok(ReducedRhs {
        derivatives,
        residuals,
    })
}

/// Steady profile of a zero-holdup section.
#[derive(Debug, Clone)]
pub struct SectionSolution {
    /// Liquid leaving the bottom tray (enters the lower aggregation stage).
    pub x_bot: f64,
    /// Vapor leaving the top tray (enters the upper aggregation stage).
    pub y_top: f64,
    /// Tray compositions from the top tray down.
    pub profile: Vec<f64>,
    /// d x_bot / d (x_upper, y_lower, r).
    pub x_bot_grad: [f64; 3],
    pub iterations: usize,
}

fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) -> bool {
    // Thomas algorithm; sub[0] and sup[n-1] unused
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return false;
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = sup[i - 1] / beta;
        beta = diag[i] - sub[i] * c[i - 1];
        if beta == 0.0 || !beta.is_finite() {
            return false;
        }
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    true
}

/// Solves the chain of `tray_count` stationary trays fed by liquid `x_upper`
/// from above and vapor `y_lower` from below at liquid/vapor ratio `r`.
pub fn section_steady_solve(
    x_upper: f64,
    y_lower: f64,
    r: f64,
    tray_count: usize,
    alpha: f64,
) -> Result<SectionSolution> {
    if ![x_upper, y_lower, r, alpha].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("section inputs"));
    }
    if tray_count == 0 {
        return Ok(SectionSolution {
            x_bot: x_upper,
            y_top: y_lower,
            profile: Vec::new(),
            x_bot_grad: [1.0, 0.0, 0.0],
            iterations: 0,
        });
    }
    let m = tray_count;
    let x_lower = liquid_equilibrium(y_lower, alpha).clamp(0.0, 1.0);
    let mut x: Vec<f64> = (1..=m)
        .map(|j| x_upper + (x_lower - x_upper) * j as f64 / (m + 1) as f64)
        .collect();

    let residual = |x: &[f64], out: &mut [f64]| {
        for j in 0..m {
            let x_in = if j == 0 { x_upper } else { x[j - 1] };
            let y_in = if j + 1 == m {
                y_lower
            } else {
                vapor_equilibrium(x[j + 1], alpha)
            };
            out[j] = r * (x_in - x[j]) + y_in - vapor_equilibrium(x[j], alpha);
        }
    };
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, e| m.max(e.abs()));

    let mut res = vec![0.0; m];
    residual(&x, &mut res);
    let mut res_norm = norm(&res);
    let tol = 1e-14;
    let max_iter = 100;
    let mut iterations = 0;
    let (mut sub, mut diag, mut sup) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let fill_jacobian = |x: &[f64], sub: &mut [f64], diag: &mut [f64], sup: &mut [f64]| {
        for j in 0..m {
            sub[j] = r;
            diag[j] = -r - vapor_equilibrium_slope(x[j], alpha);
            sup[j] = if j + 1 < m {
                vapor_equilibrium_slope(x[j + 1], alpha)
            } else {
                0.0
            };
        }
    };
    while res_norm > tol {
        if iterations >= max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: res_norm,
            });
        }
        iterations += 1;
        fill_jacobian(&x, &mut sub, &mut diag, &mut sup);
        let mut step: Vec<f64> = res.iter().map(|v| -v).collect();
        if !solve_tridiagonal(&sub, &diag, &sup, &mut step) {
            return Err(Error::NoConvergence {
                iterations,
                residual: res_norm,
            });
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; m];
        let mut trial_res = vec![0.0; m];
        for _ in 0..40 {
            for j in 0..m {
                trial[j] = (x[j] + lambda * step[j]).clamp(0.0, 1.0);
            }
            residual(&trial, &mut trial_res);
            let n = norm(&trial_res);
            if n < res_norm || n <= tol {
                accepted = true;
                x.copy_from_slice(&trial);
                res.copy_from_slice(&trial_res);
                res_norm = n;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            // stagnation at roundoff level is convergence
            if res_norm <= 1e-12 {
                break;
            }
            return Err(Error::NoConvergence {
                iterations,
                residual: res_norm,
            });
        }
    }

    // implicit differentiation: J dx/dθ = -dR/dθ
    fill_jacobian(&x, &mut sub, &mut diag, &mut sup);
    let mut grad = [0.0; 3];
    let mut col = vec![0.0; m];
    // θ = x_upper: dR_0/dx_upper = r
    col.iter_mut().for_each(|c| *c = 0.0);
    col[0] = -r;
    solve_tridiagonal(&sub, &diag, &sup, &mut col);
    grad[0] = col[m - 1];
    // θ = y_lower: dR_{m-1}/dy_lower = 1
    col.iter_mut().for_each(|c| *c = 0.0);
    col[m - 1] = -1.0;
    solve_tridiagonal(&sub, &diag, &sup, &mut col);
    grad[1] = col[m - 1];
    // θ = r: dR_j/dr = x_in - x_j
    for j in 0..m {
        let x_in = if j == 0 { x_upper } else { x[j - 1] };
        col[j] = -(x_in - x[j]);
    }
    solve_tridiagonal(&sub, &diag, &sup, &mut col);
    grad[2] = col[m - 1];

    let x_bot = x[m - 1];
    Ok(SectionSolution {
        x_bot,
        y_top: section_balance_close(x_upper, y_lower, x_bot, r),
        profile: x,
        x_bot_grad: grad,
        iterations,
    })
}

/// Vapor leaving the top of a stationary section from the section's component balance.
#[inline]
pub fn section_balance_close(x_upper: f64, y_lower: f64, x_bot: f64, r: f64) -> f64 {
    y_lower + r * (x_upper - x_bot)
}

struct FullColumnOde<'a> {
    inputs: ColumnInputs,
    params: &'a ColumnParams,
}

impl OdeSystem for FullColumnOde<'_> {
    fn dim(&self) -> usize {
        self.params.n_total
    }
    fn n_params(&self) -> usize {
        0
    }
    fn rhs(&self, _t: f64, x: &DVector<f64>, _p: &[f64]) -> Result<DVector<f64>> {
        full_rhs(x, &self.inputs, self.params)
    }
    fn jacobian(&self, _t: f64, x: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(full_jacobian(x, &self.inputs, self.params))
    }
    fn param_jacobian(&self, _t: f64, _x: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(self.params.n_total, 0))
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Damped Newton on the stage balances in logit coordinates.
fn newton_steady(
    x0: &PlantState,
    u: &ColumnInputs,
    p: &ColumnParams,
    max_iter: usize,
) -> Result<PlantState> {
    let n = p.n_total;
    let clamp = |v: f64| v.clamp(1e-300, 1.0 - 1e-16);
    let mut z: Vec<f64> = x0.iter().map(|&v| {
        let c = clamp(v);
        (c / (1.0 - c)).ln()
    }).collect();
    let to_x = |z: &[f64]| DVector::from_iterator(n, z.iter().map(|&zi| logistic(zi)));
    let scaled_norm = |b: &[f64]| {
        b.iter()
            .zip(&p.holdups)
            .fold(0.0f64, |m, (bi, ni)| m.max((bi / ni).abs()))
    };
    let mut x = to_x(&z);
    let mut b = stage_balances(x.as_slice(), u, p);
    let mut norm = scaled_norm(&b);
    let target = 1e-13;
    for it in 0..max_iter {
        if norm <= target {
            return Ok(x);
        }
        let jac = full_jacobian(&x, u, p);
        let (mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            // balance rows: holdup * (dx/dt) row; column scaling dx/dz = x (1 - x)
            let ni = p.holdups[i];
            let dz = |k: usize| x[k] * (1.0 - x[k]);
            diag[i] = jac[(i, i)] * ni * dz(i);
            if i > 0 {
                sub[i] = jac[(i, i - 1)] * ni * dz(i - 1);
            }
            if i + 1 < n {
                sup[i] = jac[(i, i + 1)] * ni * dz(i + 1);
            }
        }
        let mut step: Vec<f64> = b.iter().map(|v| -v).collect();
        if !solve_tridiagonal(&sub, &diag, &sup, &mut step) {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: norm,
            });
        }
        // cap the logit step to keep the iteration inside the basin
        let max_step = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let mut lambda = if max_step > 2.0 { 2.0 / max_step } else { 1.0 };
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = z.iter().zip(&step).map(|(zi, si)| zi + lambda * si).collect();
            let xt = to_x(&trial);
            let bt = stage_balances(xt.as_slice(), u, p);
            let nt = scaled_norm(&bt);
            if nt.is_finite() && nt < norm {
                z = trial;
                x = xt;
                b = bt;
                norm = nt;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if norm <= 1e-10 {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations: max_iter,
            residual: norm,
        })
    }
}

/// Steady state of the full-order model, by damped Newton with a
/// long-horizon integration fallback.
pub fn steady_state_solve(u: &ColumnInputs, p: &ColumnParams) -> Result<PlantState> {
    steady_state_solve_from(None, u, p)
}

/// As [`steady_state_solve`], optionally starting from a known nearby profile.
pub fn steady_state_solve_from(
    guess: Option<&PlantState>,
    u: &ColumnInputs,
    p: &ColumnParams,
) -> Result<PlantState> {
    p.validate()?;
    u.check()?;
    let n = p.n_total;
    let initial = match guess {
        Some(g) => g.clone(),
        None => {
            // split the light component by the product flows, interpolate in logit
            let d = u.distillate().max(1e-6);
            let x_d = (u.f * u.x_f / d).clamp(0.01, 0.999);
            let x_b = ((u.f * u.x_f - d * x_d) / u.bottoms().max(1e-6)).clamp(0.001, 0.99);
            let (zb, zd) = ((x_b / (1.0 - x_b)).ln(), (x_d / (1.0 - x_d)).ln());
            DVector::from_iterator(
                n,
                (0..n).map(|i| logistic(zb + (zd - zb) * i as f64 / (n - 1) as f64)),
            )
        }
    };
    if let Ok(x) = newton_steady(&initial, u, p, 200) {
        return Ok(x);
    }
    let ode = FullColumnOde { inputs: *u, params: p };
    let span = 50.0 * p.total_holdup() / u.f.min(u.v);
    let traj = integrate(&IvpProblem {
        system: &ode,
        initial_state: DVector::from_element(n, u.x_f),
        params: vec![],
        time_grid: vec![0.0, span],
        rel_tol: 1e-8,
        abs_tol: Tolerance::Scalar(1e-12),
        initial_sensitivity: None,
        initial_step: None,
        max_steps: 200_000,
    })?;
    newton_steady(traj.states.last().expect("grid has two points"), u, p, 200)
}

/// Flows (L, V) whose steady state delivers the requested product compositions.
pub fn operating_point_for_products(
    x_d: f64,
    x_b: f64,
    x_f: f64,
    p: &ColumnParams,
) -> Result<(f64, f64, PlantState)> {
    let f = p.feed_flow;
    let logit = |v: f64| (v / (1.0 - v)).ln();
    let d = f * (x_f - x_b) / (x_d - x_b);
    let mut l = 0.5 * (p.bounds_l.0 + p.bounds_l.1);
    let mut v = l + d;
    let mut guess: Option<PlantState> = None;
    let eval = |l: f64, v: f64, g: Option<&PlantState>| -> Result<(PlantState, [f64; 2])> {
        let u = ColumnInputs::new(l, v, f, x_f);
        let x = steady_state_solve_from(g, &u, p)
            .or_else(|_| steady_state_solve(&u, p))?;
        let e = [logit(x[p.n_total - 1]) - logit(x_d), logit(x[0]) - logit(x_b)];
        Ok((x, e))
    };
    let mut last = f64::INFINITY;
    for it in 0..60 {
        let (x, e) = eval(l, v, guess.as_ref())?;
        last = e[0].abs().max(e[1].abs());
        if last < 1e-9 {
            return Ok((l, v, x));
        }
        // steady-state sensitivity dx/du = -J^{-1} B, exact where finite differences drown in solver noise
        let u = ColumnInputs::new(l, v, f, x_f);
        let jx = full_jacobian(&x, &u, p);
        let ju = full_input_jacobian(&x, &u, p);
        let sens = jx.lu().solve(&ju).ok_or(Error::NoConvergence {
            iterations: it,
            residual: last,
        })?;
        let n = p.n_total;
        let gd = 1.0 / (x[n - 1] * (1.0 - x[n - 1]));
        let gb = 1.0 / (x[0] * (1.0 - x[0]));
        let j = [
            [-gd * sens[(n - 1, 0)], -gd * sens[(n - 1, 1)]],
            [-gb * sens[(0, 0)], -gb * sens[(0, 1)]],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: last,
            });
        }
        let dl = -(j[1][1] * e[0] - j[0][1] * e[1]) / det;
        let dv = -(-j[1][0] * e[0] + j[0][0] * e[1]) / det;
        // the distillate flow V - L must stay positive and move gently
        let scale = (0.05 / dl.abs().max(dv.abs()))
            .min(0.5 * (v - l) / (dl - dv).abs().max(1e-300))
            .min(1.0);
        l += scale * dl;
        v += scale * dv;
        guess = Some(x);
    }
    Err(Error::NoConvergence {
        iterations: 60,
        residual: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn nominal() -> (ColumnParams, ColumnInputs) {
        let p = ColumnParams::default();
        let u = ColumnInputs::new(2.0, 2.35, p.feed_flow, p.feed_comp_nominal);
        (p, u)
    }

    #[test]
    fn vapor_equilibrium_examples() {
        assert_eq!(vapor_equilibrium(0.0, 3.0), 0.0);
        assert_eq!(vapor_equilibrium(1.0, 3.0), 1.0);
        assert_relative_eq!(vapor_equilibrium(0.5, 2.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(liquid_equilibrium(vapor_equilibrium(0.3, 2.5), 2.5), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn default_params_are_valid() {
        ColumnParams::default().validate().unwrap();
    }

    #[test]
    fn rejects_inadmissible_bounds() {
        let mut p = ColumnParams::default();
        p.bounds_l = (1.0, 5.0);
        p.bounds_v = (2.0, 6.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn no_separation_gives_zero_derivative() {
        let (mut p, _) = nominal();
        p.alpha = 1.0;
        let u = ColumnInputs::new(2.0, 2.3, 1.0, 0.4);
        let d = full_rhs(&DVector::from_element(42, 0.4), &u, &p).unwrap();
        assert!(d.amax() < 1e-15);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let (p, mut u) = nominal();
        u.l = f64::NAN;
        assert!(full_rhs(&DVector::from_element(42, 0.4), &u, &p).is_err());
    }

    #[test]
    fn steady_state_residual_and_overall_balance() {
        let (p, u) = nominal();
        let x = steady_state_solve(&u, &p).unwrap();
        assert!(full_rhs(&x, &u, &p).unwrap().amax() <= 1e-10);
        let lhs = u.f * u.x_f;
        let rhs = u.distillate() * x[41] + u.bottoms() * x[0];
        assert!((lhs - rhs).abs() <= 1e-9);
    }

    #[test]
    fn steady_state_without_separation_is_uniform() {
        let (mut p, _) = nominal();
        p.alpha = 1.0;
        let u = ColumnInputs::new(2.0, 2.4, 1.0, 0.37);
        let x = steady_state_solve(&u, &p).unwrap();
        for xi in x.iter() {
            assert!((xi - 0.37).abs() < 1e-10);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let (p, u) = nominal();
        let x = DVector::from_fn(42, |i, _| 0.05 + 0.9 * i as f64 / 41.0);
        let jac = full_jacobian(&x, &u, &p);
        let h = 1e-7;
        for j in 0..42 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (full_rhs(&xp, &u, &p).unwrap() - full_rhs(&xm, &u, &p).unwrap()) / (2.0 * h);
            for i in 0..42 {
                assert!((col[i] - jac[(i, j)]).abs() < 1e-7 * (1.0 + jac[(i, j)].abs()));
            }
        }
        let ju = full_input_jacobian(&x, &u, &p);
        for (k, (dl, dv)) in [(h, 0.0), (0.0, h)].into_iter().enumerate() {
            let up = ColumnInputs { l: u.l + dl, v: u.v + dv, ..u };
            let um = ColumnInputs { l: u.l - dl, v: u.v - dv, ..u };
            let col = (full_rhs(&x, &up, &p).unwrap() - full_rhs(&x, &um, &p).unwrap()) / (2.0 * h);
            for i in 0..42 {
                assert!((col[i] - ju[(i, k)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn default_layout_matches_nearest_stage_rule() {
        let p = ColumnParams::default();
        let layout = AggregationLayout::default_for(&p).unwrap();
        assert_eq!(layout.agg_stages, vec![1, 14, 21, 28, 42]);
        let counts: Vec<usize> = layout.sections.iter().map(|s| s.tray_count).collect();
        assert_eq!(counts, vec![13, 6, 6, 12]);
        let stripping: Vec<bool> = layout.sections.iter().map(|s| s.stripping).collect();
        assert_eq!(stripping, vec![false, false, true, true]);
        layout.validate(&p).unwrap();
        // condenser takes trays 35..=41 (tray 35 ties between 28 and 42)
        assert_relative_eq!(layout.holdup_factors[4], 1.0 + 7.0 * 4.0 / 20.0);
    }

    #[test]
    fn layout_rejects_missing_feed_stage() {
        let p = ColumnParams::default();
        assert!(AggregationLayout::new(&p, &[1, 14, 28, 42]).is_err());
        assert!(AggregationLayout::new(&p, &[14, 21, 28, 42]).is_err());
    }

    #[test]
    fn degenerate_aggregation_equals_full_model() {
        let (p, u) = nominal();
        let all: Vec<usize> = (1..=42).collect();
        let layout = AggregationLayout::new(&p, &all).unwrap();
        assert!(layout.holdup_factors.iter().all(|&h| h == 1.0));
        let x = DVector::from_fn(42, |i, _| 0.02 + 0.95 * (i as f64 / 41.0).powi(2));
        let red = reduced_rhs(&x, &u, &p, &layout).unwrap();
        let full = full_rhs(&x, &u, &p).unwrap();
        assert!(red.residuals.is_empty());
        for (a, b) in red.derivatives.iter().zip(full.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reduced_model_vanishes_at_full_steady_state() {
        let (p, u) = nominal();
        let layout = AggregationLayout::default_for(&p).unwrap();
        let x = steady_state_solve(&u, &p).unwrap();
        let red = reduced_rhs(&x, &u, &p, &layout).unwrap();
        assert!(red.derivatives.iter().all(|d| d.abs() <= 1e-10));
        assert!(red.residuals.iter().all(|(_, r)| r.abs() <= 1e-10));
        assert_eq!(red.residuals.len(), 37);
    }

    #[test]
    fn reduced_residuals_are_tray_balances() {
        let (p, u) = nominal();
        let layout = AggregationLayout::default_for(&p).unwrap();
        let x = DVector::from_fn(42, |i, _| 0.01 + 0.98 * (i as f64 / 41.0).sqrt());
        let red = reduced_rhs(&x, &u, &p, &layout).unwrap();
        let full = full_rhs(&x, &u, &p).unwrap();
        for &(s, r) in &red.residuals {
            assert_relative_eq!(r, full[s - 1] * p.holdup(s), max_relative = 1e-14);
        }
    }

    #[test]
    fn section_examples() {
        let s = section_steady_solve(0.3, 0.7, 1.2, 0, 2.0).unwrap();
        assert_eq!((s.x_bot, s.y_top), (0.3, 0.7));
        let s = section_steady_solve(0.4, 0.6, 1.0, 1, 1.0).unwrap();
        assert_relative_eq!(s.x_bot, 0.5, epsilon = 1e-14);
        assert_relative_eq!(s.y_top, 0.5, epsilon = 1e-14);
        assert_relative_eq!(section_balance_close(0.4, 0.6, 0.5, 1.0), 0.5, epsilon = 1e-15);
        assert_eq!(section_balance_close(0.4, 0.6, 0.4, 3.0), 0.6);
    }

    #[test]
    fn section_matches_full_steady_profile() {
        let (p, u) = nominal();
        let x = steady_state_solve(&u, &p).unwrap();
        let r = u.l / u.v;
        // top section: trays 29..=41 between stage 28 and the condenser
        let s = section_steady_solve(x[41], vapor_equilibrium(x[27], p.alpha), r, 13, p.alpha).unwrap();
        assert!((s.x_bot - x[28]).abs() <= 1e-8);
        assert!((s.y_top - vapor_equilibrium(x[40], p.alpha)).abs() <= 1e-8);
        for (j, xj) in s.profile.iter().enumerate() {
            assert!((xj - x[40 - j]).abs() <= 1e-8);
        }
        let balance = r * x[41] + vapor_equilibrium(x[27], p.alpha) - r * s.x_bot - s.y_top;
        assert!(balance.abs() <= 1e-10);
    }

    #[test]
    fn section_gradient_matches_finite_differences() {
        let base = [0.93, 0.6, 0.87];
        let s = section_steady_solve(base[0], base[1], base[2], 6, 2.0).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let mut a = base;
            let mut b = base;
            a[k] += h;
            b[k] -= h;
            let fa = section_steady_solve(a[0], a[1], a[2], 6, 2.0).unwrap().x_bot;
            let fb = section_steady_solve(b[0], b[1], b[2], 6, 2.0).unwrap().x_bot;
            let fd = (fa - fb) / (2.0 * h);
            assert!((fd - s.x_bot_grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", s.x_bot_grad[k]);
        }
    }

    #[test]
    fn operating_point_hits_products() {
        let p = ColumnParams::default();
        let (l, v, x) = operating_point_for_products(0.99995, 0.00005, 0.32, &p).unwrap();
        assert!(p.within_bounds(l, v), "{l} {v}");
        assert_relative_eq!(x[41], 0.99995, max_relative = 1e-9);
        assert_relative_eq!(x[0], 0.00005, max_relative = 1e-7);
    }

    proptest::proptest! {
        #[test]
        fn holdup_weighted_rhs_equals_net_inflow(
            x in proptest::collection::vec(0.0f64..1.0, 42),
            l in 1.9f64..2.15, v in 2.2f64..2.6, x_f in 0.0f64..1.0,
        ) {
            let p = ColumnParams::default();
            let u = ColumnInputs::new(l, v, p.feed_flow, x_f);
            let x = DVector::from_vec(x);
            let d = full_rhs(&x, &u, &p).unwrap();
            let acc: f64 = (0..42).map(|i| p.holdups[i] * d[i]).sum();
            let net = u.f * x_f - u.distillate() * x[41] - u.bottoms() * x[0];
            proptest::prop_assert!((acc - net).abs() <= 1e-12, "{acc} vs {net}");
        }
    }
}
