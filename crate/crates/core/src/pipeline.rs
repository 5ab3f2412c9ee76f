//! Training data from plant measurements: derivative estimates, top-down
//! balance cascade, feed composition estimate and steadiness weights.

use serde::{Deserialize, Serialize};

use crate::column::{vapor_equilibrium, AggregationLayout, ColumnParams};
use crate::error::{Error, Result};
use crate::learner::{DataPoint, Source};

/// Measured compositions at the aggregation stages (ascending stage order,
/// reboiler first) and the flows applied over the period ending at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub t: f64,
    pub x_agg: Vec<f64>,
    pub l: f64,
    pub v: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivEstimate {
    /// dx/dt per aggregation stage (1/s).
    pub dxdt: Vec<f64>,
    /// Number of measurements used.
    pub window: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Steadiness weight decay (s).
    pub kappa: f64,
    /// Standard deviation of additive measurement noise (zero: clean measurements).
    pub measurement_noise: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            kappa: default_kappa(60.0),
            measurement_noise: 0.0,
        }
    }
}

/// Decay giving weight 1/2 when one state moves 1 % of its range per sampling period.
pub fn default_kappa(sampling_time: f64) -> f64 {
    std::f64::consts::LN_2 * sampling_time / 0.01
}

/// Backward difference over the last two measurements of `history`.
pub fn estimate_derivatives(history: &[Measurement]) -> Result<DerivEstimate> {
    if history.len() < 2 {
        return Err(Error::WarmUp {
            have: history.len(),
            need: 2,
        });
    }
    let cur = &history[history.len() - 1];
    let prev = &history[history.len() - 2];
    let dt = cur.t - prev.t;
    if !(dt > 0.0) || cur.x_agg.len() != prev.x_agg.len() {
        return Err(Error::InvalidParams("measurement history is not a uniform time series".into()));
    }
    let dxdt = cur.x_agg.iter().zip(&prev.x_agg).map(|(a, b)| (a - b) / dt).collect();
    Ok(DerivEstimate { dxdt, window: 2 })
}

/// w = exp(-kappa * Σ |dx/dt|).
pub fn steadiness_weight(d: &DerivEstimate, kappa: f64) -> f64 {
    let s: f64 = d.dxdt.iter().map(|v| v.abs()).sum();
    (-kappa * s).exp()
}

/// Feed composition from the balance around the whole column, clamped to [0, 1].
pub fn estimate_feed_composition(
    m: &Measurement,
    d: &DerivEstimate,
    layout: &AggregationLayout,
    p: &ColumnParams,
) -> f64 {
    let n = layout.n_agg();
    let dist = m.v - m.l;
    let bot = m.f + m.l - m.v;
    let accumulation: f64 = (0..n).map(|a| layout.effective_holdup(a, p) * d.dxdt[a]).sum();
    ((dist * m.x_agg[n - 1] + bot * m.x_agg[0] + accumulation) / m.f).clamp(0.0, 1.0)
}

/// Result of the balance cascade for one measurement.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// One entry per section (top to bottom); `None` where the target left [0, 1].
    pub points: Vec<Option<DataPoint>>,
    pub discarded: usize,
    pub x_f_hat: f64,
    pub weight: f64,
    /// Reboiler balance left over after the cascade (mol/s).
    pub reboiler_residual: f64,
    /// Reconstructed targets before the range check, top to bottom.
    pub raw_targets: Vec<f64>,
}

/// Top-down cascade: each aggregation-stage balance yields the vapor entering
/// it from below, each section balance then the liquid leaving the section.
/// The feed stage uses the estimated feed composition; the reboiler balance
/// is left over as a consistency check.
pub fn reconstruct_training_points(
    m: &Measurement,
    d: &DerivEstimate,
    layout: &AggregationLayout,
    p: &ColumnParams,
    kappa: f64,
) -> Result<Reconstruction> {
    let n = layout.n_agg();
    if m.x_agg.len() != n || d.dxdt.len() != n {
        return Err(Error::InvalidParams("measurement does not match the aggregation layout".into()));
    }
    if !(m.f > 0.0 && m.v > 0.0) {
        return Err(Error::InvalidParams("feed and vapor flows must be positive".into()));
    }
    let x = &m.x_agg;
    let y: Vec<f64> = x.iter().map(|&xi| vapor_equilibrium(xi, p.alpha)).collect();
    let x_f_hat = estimate_feed_composition(m, d, layout, p);
    let weight = steadiness_weight(d, kappa);
    let acc = |a: usize| layout.effective_holdup(a, p) * d.dxdt[a];

    // condenser: acc = V (y_in - x_D)
    let mut y_in = x[n - 1] + acc(n - 1) / m.v;
    let mut points = Vec::with_capacity(layout.sections.len());
    let mut raw_targets = Vec::with_capacity(layout.sections.len());
    let mut discarded = 0;
    let mut x_in_last = f64::NAN;
    for sec in &layout.sections {
        let au = layout
            .agg_stages
            .iter()
            .position(|&s| s == sec.upper)
            .ok_or_else(|| Error::InvalidParams("section upper stage is not aggregated".into()))?;
        let al = au - 1;
        let r = sec.flow_ratio(m.l, m.v, m.f);
        // section balance: y_top = y_lower + r (x_upper - x_bot)
        let x_bot = x[au] - (y_in - y[al]) / r;
        raw_targets.push(x_bot);
        if (0.0..=1.0).contains(&x_bot) && x_bot.is_finite() {
            points.push(Some(DataPoint {
                t: m.t,
                input: [x[au], y[al], r],
                target: x_bot,
                weight,
                source: Source::ClosedLoop,
            }));
        } else {
            points.push(None);
            discarded += 1;
        }
        let s = layout.agg_stages[al];
        if s == 1 {
            x_in_last = x_bot;
            break;
        }
        // interior stage: acc = L_in x_in + V y_in - L_out x - V y (+ F x_F)
        let l_in = p.liquid_in(s, m.l, m.f);
        let l_out = p.liquid_out(s, m.l, m.f);
        let feed = if s == p.feed_stage { m.f * x_f_hat } else { 0.0 };
        y_in = (acc(al) - l_in * x_bot + l_out * x[al] + m.v * y[al] - feed) / m.v;
    }
    // reboiler: acc = (L + F)(x_in - x_B) + V (x_B - y_B)
    let reboiler_residual =
        (m.l + m.f) * (x_in_last - x[0]) + m.v * (x[0] - y[0]) - acc(0);
    Ok(Reconstruction {
        points,
        discarded,
        x_f_hat,
        weight,
        reboiler_residual,
        raw_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meas(t: f64, x: Vec<f64>) -> Measurement {
        Measurement {
            t,
            x_agg: x,
            l: 2.0,
            v: 2.35,
            f: 1.0,
        }
    }

    #[test]
    fn derivative_estimates() {
        assert!(matches!(estimate_derivatives(&[meas(0.0, vec![0.1; 5])]), Err(Error::WarmUp { .. })));
        let d = estimate_derivatives(&[meas(0.0, vec![0.1; 5]), meas(60.0, vec![0.1; 5])]).unwrap();
        assert!(d.dxdt.iter().all(|&v| v == 0.0));
        let ramp = |t: f64| meas(t, (0..5).map(|i| 0.1 + 1e-4 * i as f64 * t).collect());
        let d = estimate_derivatives(&[ramp(0.0), ramp(60.0), ramp(120.0)]).unwrap();
        for (i, v) in d.dxdt.iter().enumerate() {
            assert!((v - 1e-4 * i as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn steadiness_weight_shape() {
        let k = default_kappa(60.0);
        assert_eq!(steadiness_weight(&DerivEstimate { dxdt: vec![0.0; 5], window: 2 }, k), 1.0);
        let half = DerivEstimate {
            dxdt: vec![std::f64::consts::LN_2 / k, 0.0, 0.0, 0.0, 0.0],
            window: 2,
        };
        assert!((steadiness_weight(&half, k) - 0.5).abs() < 1e-15);
        let d1 = DerivEstimate { dxdt: vec![1e-5, -2e-5, 0.0, 3e-6, 0.0], window: 2 };
        let d2 = DerivEstimate { dxdt: d1.dxdt.iter().map(|v| 2.0 * v).collect(), window: 2 };
        assert!(steadiness_weight(&d2, k) < steadiness_weight(&d1, k));
    }

    #[test]
    fn condenser_inversion_by_hand() {
        let p = ColumnParams::default();
        let layout = AggregationLayout::default_for(&p).unwrap();
        let m = meas(0.0, vec![0.01, 0.1, 0.4, 0.8, 0.97]);
        let d = DerivEstimate { dxdt: vec![0.0, 0.0, 0.0, 0.0, 2e-4], window: 2 };
        let rec = reconstruct_training_points(&m, &d, &layout, &p, 1.0).unwrap();
        let hn = layout.effective_holdup(4, &p);
        let y_top = 0.97 + hn * 2e-4 / 2.35;
        let y_lower = vapor_equilibrium(0.8, p.alpha);
        let r = 2.0 / 2.35;
        let expect = 0.97 - (y_top - y_lower) / r;
        assert!((rec.raw_targets[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn feed_estimate_linearity() {
        let p = ColumnParams::default();
        let layout = AggregationLayout::default_for(&p).unwrap();
        let m = Measurement { t: 0.0, x_agg: vec![0.02, 0.1, 0.4, 0.8, 0.98], l: 2.0, v: 2.5, f: 1.0 };
        let zero = DerivEstimate { dxdt: vec![0.0; 5], window: 2 };
        // D = B = 0.5, symmetric products
        let base = estimate_feed_composition(&m, &zero, &layout, &p);
        assert!((base - (0.5 * 0.98 + 0.5 * 0.02)).abs() < 1e-15);
        let mut d = zero.clone();
        d.dxdt[2] = 1e-4;
        let shifted = estimate_feed_composition(&m, &d, &layout, &p);
        assert!((shifted - base - layout.effective_holdup(2, &p) * 1e-4 / 1.0).abs() < 1e-14);
    }
}
