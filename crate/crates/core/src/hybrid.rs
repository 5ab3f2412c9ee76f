//! Hybrid stage-aggregation model: dynamic aggregation stages coupled through
//! stationary sections whose bottom liquid is predicted by a section model.

use nalgebra::{DMatrix, DVector};

use crate::column::{
    section_balance_close, section_steady_solve, vapor_equilibrium, vapor_equilibrium_slope,
    AggregationLayout, ColumnInputs, ColumnParams, Section,
};
use crate::error::{Error, Result};
use crate::integrator::{integrate, IvpProblem, OdeSystem, Tolerance};
use crate::surrogate::{SurrogateModel, EPS, N_INPUTS};

/// Compositions at the aggregation stages, ascending stage order
/// (entry 0 is the reboiler / x_B, the last entry the condenser / x_D).
pub type HybridState = DVector<f64>;

/// Prediction of a section's bottom liquid composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionPrediction {
    pub x_bot: f64,
    /// d x_bot / d (x_upper, y_lower, r).
    pub grad: [f64; N_INPUTS],
    /// The raw prediction left [EPS, 1 - EPS] and was clamped.
    pub clamped: bool,
}

/// Source of stationary-section predictions. Section `k` counts from the top.
pub trait SectionModel: Send + Sync {
    fn predict(&self, k: usize, section: &Section, input: &[f64; N_INPUTS]) -> Result<SectionPrediction>;
}

fn clamp_prediction(x_bot: f64, grad: [f64; N_INPUTS]) -> SectionPrediction {
    if x_bot < EPS || x_bot > 1.0 - EPS {
        SectionPrediction {
            x_bot: x_bot.clamp(EPS, 1.0 - EPS),
            grad: [0.0; N_INPUTS],
            clamped: true,
        }
    } else {
        SectionPrediction {
            x_bot,
            grad,
            clamped: false,
        }
    }
}

impl SectionModel for [SurrogateModel] {
    fn predict(&self, k: usize, _section: &Section, input: &[f64; N_INPUTS]) -> Result<SectionPrediction> {
        let model = self
            .get(k)
            .ok_or_else(|| Error::InvalidParams(format!("no surrogate for section {k}")))?;
        let (x_bot, grad) = model.eval_with_input_jacobian(input);
        if !x_bot.is_finite() {
            return Err(Error::NonFinite("surrogate output"));
        }
        Ok(clamp_prediction(x_bot, grad))
    }
}

impl SectionModel for Vec<SurrogateModel> {
    fn predict(&self, k: usize, section: &Section, input: &[f64; N_INPUTS]) -> Result<SectionPrediction> {
        self.as_slice().predict(k, section, input)
    }
}

/// Exact stationary sections solved tray by tray.
#[derive(Debug, Clone, Copy)]
pub struct OracleSections {
    pub alpha: f64,
}

impl SectionModel for OracleSections {
    fn predict(&self, _k: usize, section: &Section, input: &[f64; N_INPUTS]) -> Result<SectionPrediction> {
        let sol = section_steady_solve(input[0], input[1], input[2], section.tray_count, self.alpha)?;
        Ok(clamp_prediction(sol.x_bot, sol.x_bot_grad))
    }
}

/// Right-hand side of the hybrid model with its partial derivatives.
#[derive(Debug, Clone)]
pub struct HybridRhs {
    pub derivatives: HybridState,
    /// d f / d x (n_agg × n_agg).
    pub state_jacobian: DMatrix<f64>,
    /// d f / d (L, V) (n_agg × 2).
    pub input_jacobian: DMatrix<f64>,
    /// At least one section prediction was clamped.
    pub clamped: bool,
}

/// A quantity together with its gradient over (x_agg.., L, V).
#[derive(Clone)]
struct Lin {
    val: f64,
    grad: Vec<f64>,
}

impl Lin {
    fn zero(n: usize) -> Self {
        Lin {
            val: 0.0,
            grad: vec![0.0; n + 2],
        }
    }

    /// self += c * other
    fn add_scaled(&mut self, c: f64, other: &Lin) {
        self.val += c * other.val;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += c * o;
        }
    }
}

/// Hybrid model right-hand side.
pub fn hybrid_rhs(
    x: &HybridState,
    u: &ColumnInputs,
    sections: &dyn SectionModel,
    p: &ColumnParams,
    layout: &AggregationLayout,
) -> Result<HybridRhs> {
    let n = layout.n_agg();
    if x.len() != n {
        return Err(Error::InvalidParams(format!(
            "hybrid state has {} entries, layout has {n} aggregation stages",
            x.len()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("hybrid state"));
    }
    if ![u.l, u.v, u.f, u.x_f].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("column inputs"));
    }
    let (il, iv) = (n, n + 1);
    let alpha = p.alpha;

    // per aggregation stage: liquid composition, equilibrium vapor, flows, all as Lin
    let xs: Vec<Lin> = (0..n)
        .map(|a| {
            let mut v = Lin::zero(n);
            v.val = x[a];
            v.grad[a] = 1.0;
            v
        })
        .collect();
    let ys: Vec<Lin> = (0..n)
        .map(|a| {
            let mut v = Lin::zero(n);
            v.val = vapor_equilibrium(x[a], alpha);
            v.grad[a] = vapor_equilibrium_slope(x[a], alpha);
            v
        })
        .collect();

    // liquid entering each stage from above, vapor entering from below
    let mut x_in: Vec<Option<Lin>> = vec![None; n];
    let mut y_in: Vec<Option<Lin>> = vec![None; n];
    let mut clamped = false;
    for (k, sec) in layout.sections.iter().enumerate() {
        let au = layout
            .agg_stages
            .iter()
            .position(|&s| s == sec.upper)
            .ok_or_else(|| Error::InvalidParams("section upper stage is not aggregated".into()))?;
        let al = au - 1;
        let r = sec.flow_ratio(u.l, u.v, u.f);
        let (dr_dl, dr_dv) = sec.flow_ratio_grad(u.l, u.v, u.f);
        let input = [x[au], ys[al].val, r];
        let pred = sections.predict(k, sec, &input)?;
        clamped |= pred.clamped;

        let mut xb = Lin::zero(n);
        xb.add_scaled(pred.grad[0], &xs[au]);
        xb.add_scaled(pred.grad[1], &ys[al]);
        xb.val = pred.x_bot;
        xb.grad[il] += pred.grad[2] * dr_dl;
        xb.grad[iv] += pred.grad[2] * dr_dv;

        // y_top = y_lower + r (x_upper - x_bot)
        let mut yt = Lin::zero(n);
        yt.add_scaled(1.0, &ys[al]);
        yt.add_scaled(r, &xs[au]);
        yt.add_scaled(-r, &xb);
        yt.val = section_balance_close(input[0], input[1], pred.x_bot, r);
        let diff = x[au] - pred.x_bot;
        yt.grad[il] += diff * dr_dl;
        yt.grad[iv] += diff * dr_dv;

        x_in[al] = Some(xb);
        y_in[au] = Some(yt);
    }

    let mut derivatives = DVector::zeros(n);
    let mut state_jacobian = DMatrix::zeros(n, n);
    let mut input_jacobian = DMatrix::zeros(n, 2);
    for a in 0..n {
        let s = layout.agg_stages[a];
        let mut b = Lin::zero(n);
        let missing = || Error::InvalidParams(format!("aggregation stage {s} has no neighbouring section"));
        if s == p.n_total {
            // condenser: V (y_in - x_D)
            let yin = y_in[a].as_ref().ok_or_else(missing)?;
            b.add_scaled(u.v, yin);
            b.add_scaled(-u.v, &xs[a]);
            b.grad[iv] += yin.val - x[a];
        } else if s == 1 {
            // reboiler: (L + F)(x_in - x_B) + V (x_B - y_B)
            let xin = x_in[a].as_ref().ok_or_else(missing)?;
            let lf = u.l + u.f;
            b.add_scaled(lf, xin);
            b.add_scaled(-lf, &xs[a]);
            b.add_scaled(u.v, &xs[a]);
            b.add_scaled(-u.v, &ys[a]);
            b.grad[il] += xin.val - x[a];
            b.grad[iv] += x[a] - ys[a].val;
        } else {
            let xin = x_in[a].as_ref().ok_or_else(missing)?;
            let yin = y_in[a].as_ref().ok_or_else(missing)?;
            let l_in = p.liquid_in(s, u.l, u.f);
            let l_out = p.liquid_out(s, u.l, u.f);
            b.add_scaled(l_in, xin);
            b.add_scaled(u.v, yin);
            b.add_scaled(-l_out, &xs[a]);
            b.add_scaled(-u.v, &ys[a]);
            b.grad[il] += xin.val - x[a];
            b.grad[iv] += yin.val - ys[a].val;
            if s == p.feed_stage {
                b.val += u.f * u.x_f;
            }
        }
        let inv = 1.0 / layout.effective_holdup(a, p);
        derivatives[a] = b.val * inv;
        for j in 0..n {
            state_jacobian[(a, j)] = b.grad[j] * inv;
        }
        input_jacobian[(a, 0)] = b.grad[il] * inv;
        input_jacobian[(a, 1)] = b.grad[iv] * inv;
    }
    if !derivatives.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("hybrid right-hand side"));
    }
    Ok(HybridRhs {
        derivatives,
        state_jacobian,
        input_jacobian,
        clamped,
    })
}

/// Derivatives of the hybrid model without partials; agrees with
/// [`hybrid_rhs`] and is cheaper inside Newton iterations.
pub fn hybrid_derivatives(
    x: &HybridState,
    u: &ColumnInputs,
    sections: &dyn SectionModel,
    p: &ColumnParams,
    layout: &AggregationLayout,
) -> Result<(HybridState, bool)> {
    let n = layout.n_agg();
    if x.len() != n {
        return Err(Error::InvalidParams(format!(
            "hybrid state has {} entries, layout has {n} aggregation stages",
            x.len()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("hybrid state"));
    }
    if ![u.l, u.v, u.f, u.x_f].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("column inputs"));
    }
    let ys: Vec<f64> = x.iter().map(|&xa| vapor_equilibrium(xa, p.alpha)).collect();
    let mut x_in = vec![f64::NAN; n];
    let mut y_in = vec![f64::NAN; n];
    let mut clamped = false;
    for (k, sec) in layout.sections.iter().enumerate() {
        let au = layout
            .agg_stages
            .iter()
            .position(|&s| s == sec.upper)
            .ok_or_else(|| Error::InvalidParams("section upper stage is not aggregated".into()))?;
        let al = au - 1;
        let r = sec.flow_ratio(u.l, u.v, u.f);
        let input = [x[au], ys[al], r];
        let pred = sections.predict(k, sec, &input)?;
        clamped |= pred.clamped;
        x_in[al] = pred.x_bot;
        y_in[au] = section_balance_close(input[0], input[1], pred.x_bot, r);
    }
    let mut d = DVector::zeros(n);
    for a in 0..n {
        let s = layout.agg_stages[a];
        let b = if s == p.n_total {
            u.v * (y_in[a] - x[a])
        } else if s == 1 {
            (u.l + u.f) * (x_in[a] - x[a]) + u.v * (x[a] - ys[a])
        } else {
            let feed = if s == p.feed_stage { u.f * u.x_f } else { 0.0 };
            p.liquid_in(s, u.l, u.f) * x_in[a] + u.v * y_in[a] - p.liquid_out(s, u.l, u.f) * x[a] - u.v * ys[a]
                + feed
        };
        d[a] = b / layout.effective_holdup(a, p);
    }
    if !d.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("hybrid right-hand side"));
    }
    Ok((d, clamped))
}

/// Steady state of the hybrid model by damped Newton in logit coordinates.
/// When Newton stalls from `guess`, the model is integrated toward steady
/// state first and Newton restarts from there.
pub fn hybrid_steady_state(
    guess: &HybridState,
    u: &ColumnInputs,
    sections: &dyn SectionModel,
    p: &ColumnParams,
    layout: &AggregationLayout,
) -> Result<HybridState> {
    let first = match newton_steady(guess, u, sections, p, layout) {
        Ok(x) => return Ok(x),
        Err(e) => e,
    };
    let ode = HybridOde { u, sections, p, layout };
    let span = 50.0 * p.total_holdup() / u.f.min(u.v);
    let settled = integrate(&IvpProblem {
        system: &ode,
        initial_state: guess.clone(),
        params: vec![],
        time_grid: vec![0.0, span],
        rel_tol: 1e-8,
        abs_tol: Tolerance::Scalar(1e-12),
        initial_sensitivity: None,
        initial_step: None,
        max_steps: 200_000,
    })
    .map_err(|_| first)?;
    newton_steady(settled.states.last().expect("grid has two points"), u, sections, p, layout)
}

fn newton_steady(
    guess: &HybridState,
    u: &ColumnInputs,
    sections: &dyn SectionModel,
    p: &ColumnParams,
    layout: &AggregationLayout,
) -> Result<HybridState> {
    let n = layout.n_agg();
    let norm = |r: &HybridRhs| r.derivatives.amax();
    let logistic = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut z: DVector<f64> = guess.map(|v| {
        let c = v.clamp(1e-300, 1.0 - 1e-16);
        (c / (1.0 - c)).ln()
    });
    let mut x = z.map(logistic);
    let mut rhs = hybrid_rhs(&x, u, sections, p, layout)?;
    let mut res = norm(&rhs);
    for _ in 0..100 {
        if res <= 1e-14 {
            break;
        }
        let mut jac = rhs.state_jacobian.clone();
        for j in 0..n {
            let dz = x[j] * (1.0 - x[j]);
            jac.column_mut(j).scale_mut(dz);
        }
        let step = match jac.lu().solve(&(-&rhs.derivatives)) {
            Some(s) => s,
            None => break,
        };
        let cap = step.amax();
        let mut lambda = if cap > 2.0 { 2.0 / cap } else { 1.0 };
        let mut improved = false;
        for _ in 0..30 {
            let zt = &z + lambda * &step;
            let xt = zt.map(logistic);
            if let Ok(rt) = hybrid_rhs(&xt, u, sections, p, layout) {
                let nt = norm(&rt);
                if nt.is_finite() && nt < res {
                    z = zt;
                    x = xt;
                    rhs = rt;
                    res = nt;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if res <= 1e-11 {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations: 100,
            residual: res,
        })
    }
}

/// The hybrid model at fixed inputs as an autonomous ODE.
struct HybridOde<'a> {
    u: &'a ColumnInputs,
    sections: &'a dyn SectionModel,
    p: &'a ColumnParams,
    layout: &'a AggregationLayout,
}

impl OdeSystem for HybridOde<'_> {
    fn dim(&self) -> usize {
        self.layout.n_agg()
    }
    fn n_params(&self) -> usize {
        0
    }
    fn rhs(&self, _t: f64, x: &DVector<f64>, _p: &[f64]) -> Result<DVector<f64>> {
        Ok(hybrid_derivatives(x, self.u, self.sections, self.p, self.layout)?.0)
    }
    fn jacobian(&self, _t: f64, x: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(hybrid_rhs(x, self.u, self.sections, self.p, self.layout)?.state_jacobian)
    }
    fn param_jacobian(&self, _t: f64, x: &DVector<f64>, _p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(x.len(), 0))
    }
}
