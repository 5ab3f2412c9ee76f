//! Run configuration and scenario files (TOML).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::column::{AggregationLayout, ColumnParams};
use crate::error::{Error, Result};
use crate::learner::{LearnerConfig, TrainConfig};
use crate::nmpc::OcpSpec;
use crate::pipeline::{default_kappa, PipelineConfig};

/// Column section of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnConfig {
    pub n_total: usize,
    pub feed_stage: usize,
    pub alpha: f64,
    pub tray_holdup: f64,
    pub condenser_holdup: f64,
    pub reboiler_holdup: f64,
    /// Per-stage holdups (reboiler first); overrides the three values above.
    pub holdups: Option<Vec<f64>>,
    pub feed_flow: f64,
    pub feed_comp_nominal: f64,
    pub bounds_l: [f64; 2],
    pub bounds_v: [f64; 2],
}

impl Default for ColumnConfig {
    fn default() -> Self {
        ColumnConfig {
            n_total: 42,
            feed_stage: 21,
            alpha: 2.0,
            tray_holdup: 4.0,
            condenser_holdup: 20.0,
            reboiler_holdup: 20.0,
            holdups: None,
            feed_flow: 1.0,
            feed_comp_nominal: 0.32,
            bounds_l: [1.9, 2.15],
            bounds_v: [2.2, 2.6],
        }
    }
}

impl ColumnConfig {
    pub fn params(&self) -> Result<ColumnParams> {
        let mut p = ColumnParams::uniform(
            self.n_total,
            self.feed_stage,
            self.alpha,
            self.tray_holdup,
            self.condenser_holdup,
            self.reboiler_holdup,
            self.feed_flow,
            self.feed_comp_nominal,
            (self.bounds_l[0], self.bounds_l[1]),
            (self.bounds_v[0], self.bounds_v[1]),
        );
        if let Some(h) = &self.holdups {
            p.holdups = h.clone();
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    /// Aggregation stages; empty selects reboiler, 14, feed, 28 and condenser.
    pub agg_stages: Vec<usize>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            agg_stages: vec![1, 14, 21, 28, 42],
        }
    }
}

/// Controller settings; bounds come from the column section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub control_horizon: f64,
    pub prediction_horizon: f64,
    pub intervals: usize,
    pub sampling_time: f64,
    pub objective_scale: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iterations: usize,
    pub max_evaluations: usize,
    pub pg_tol: f64,
    pub decrease_tol: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        let s = OcpSpec::for_params(&ColumnParams::default());
        OcpConfig {
            control_horizon: s.t_c,
            prediction_horizon: s.t_p,
            intervals: s.n,
            sampling_time: s.t_s,
            objective_scale: s.objective_scale,
            rel_tol: s.rel_tol,
            abs_tol: s.abs_tol,
            max_iterations: s.max_iterations,
            max_evaluations: s.max_evaluations,
            pg_tol: s.pg_tol,
            decrease_tol: s.decrease_tol,
        }
    }
}

/// Open-loop step tests that produce the initial data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepTestConfig {
    pub trajectories: usize,
    /// Length of each trajectory (s).
    pub duration: f64,
    /// Range of the feed composition after its step.
    pub x_f_range: [f64; 2],
    /// Largest relative step of L and V from their nominal values (targets are kept inside the bounds).
    pub flow_step_fraction: f64,
}

impl Default for StepTestConfig {
    fn default() -> Self {
        StepTestConfig {
            trajectories: 20,
            duration: 3600.0,
            x_f_range: [0.2, 0.45],
            flow_step_fraction: 0.3,
        }
    }
}

/// Offline oracle data set for the offline-trained baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub points_per_section: usize,
    pub held_out_points: usize,
    /// Steady states used to find each section's reachable input box.
    pub box_design_points: usize,
    /// Relative widening of the reachable box in feature space.
    pub box_margin: f64,
    /// Half-width, in logit units, of the product purities around the set-points.
    pub purity_band: f64,
    pub x_f_range: [f64; 2],
    pub train: TrainConfig,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            points_per_section: 5000,
            held_out_points: 1000,
            box_design_points: 60,
            box_margin: 0.1,
            purity_band: 2.0,
            x_f_range: [0.2, 0.45],
            train: TrainConfig::default(),
        }
    }
}

/// Plant simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Product log points per sampling period (for the objective quadrature).
    pub log_points_per_period: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            log_points_per_period: 12,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub column: ColumnConfig,
    pub layout: LayoutConfig,
    pub ocp: OcpConfig,
    pub learner: LearnerConfig,
    pub pipeline: PipelineConfig,
    pub step_tests: StepTestConfig,
    pub offline: OfflineConfig,
    pub plant: PlantConfig,
    /// Measurements at the start of a run that yield no training data.
    pub warmup_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            column: ColumnConfig::default(),
            layout: LayoutConfig::default(),
            ocp: OcpConfig::default(),
            learner: LearnerConfig::default(),
            pipeline: PipelineConfig {
                kappa: default_kappa(60.0),
                measurement_noise: 0.0,
            },
            step_tests: StepTestConfig::default(),
            offline: OfflineConfig::default(),
            plant: PlantConfig::default(),
            warmup_steps: 2,
        }
    }
}

/// Validated, ready-to-use view of a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub params: ColumnParams,
    pub layout: AggregationLayout,
    pub ocp: OcpSpec,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Cross-checks all sections and builds the model objects.
    pub fn resolve(&self) -> Result<Resolved> {
        let params = self.column.params()?;
        let layout = if self.layout.agg_stages.is_empty() {
            AggregationLayout::default_for(&params)?
        } else {
            AggregationLayout::new(&params, &self.layout.agg_stages)?
        };
        layout.validate(&params)?;
        let o = &self.ocp;
        let ocp = OcpSpec {
            t_c: o.control_horizon,
            t_p: o.prediction_horizon,
            n: o.intervals,
            t_s: o.sampling_time,
            sp_d: 0.99995,
            sp_b: 0.00005,
            bounds_l: params.bounds_l,
            bounds_v: params.bounds_v,
            objective_scale: o.objective_scale,
            rel_tol: o.rel_tol,
            abs_tol: o.abs_tol,
            max_iterations: o.max_iterations,
            max_evaluations: o.max_evaluations,
            pg_tol: o.pg_tol,
            decrease_tol: o.decrease_tol,
        };
        ocp.validate()?;
        if !(self.pipeline.kappa > 0.0) {
            return Err(Error::Config("pipeline.kappa must be positive".into()));
        }
        if self.pipeline.measurement_noise < 0.0 {
            return Err(Error::Config("pipeline.measurement_noise must be non-negative".into()));
        }
        if self.learner.replay_size == 0 || self.learner.initial_hidden == 0 {
            return Err(Error::Config("learner.replay_size and initial_hidden must be positive".into()));
        }
        if self.learner.initial_hidden > self.learner.train.max_nodes {
            return Err(Error::Config("learner.initial_hidden exceeds max_nodes".into()));
        }
        if self.warmup_steps < 2 {
            return Err(Error::Config("warmup_steps must cover the derivative window (>= 2)".into()));
        }
        if self.plant.log_points_per_period == 0 {
            return Err(Error::Config("plant.log_points_per_period must be positive".into()));
        }
        for (name, [lo, hi]) in [("step_tests", self.step_tests.x_f_range), ("offline", self.offline.x_f_range)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!("{name}.x_f_range must lie in [0, 1]")));
            }
        }
        if self.step_tests.trajectories == 0 || !(self.step_tests.duration >= 2.0 * o.sampling_time) {
            return Err(Error::Config("step tests need a trajectory spanning at least two sampling periods".into()));
        }
        if !(self.offline.purity_band >= 0.0 && self.offline.box_margin >= 0.0) {
            return Err(Error::Config("offline.purity_band and box_margin must be non-negative".into()));
        }
        if !(self.step_tests.flow_step_fraction >= 0.0) {
            return Err(Error::Config("step_tests.flow_step_fraction must be non-negative".into()));
        }
        Ok(Resolved { params, layout, ocp })
    }
}

/// The four compared control schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Approach {
    /// (i) surrogates retrained online.
    Adaptive,
    /// (ii) surrogates from the step tests only.
    InitialOnly,
    /// (iii) surrogates trained on dense oracle data.
    OfflineTrained,
    /// (iv) full-order model with full state and true disturbance.
    Ideal,
}

impl Approach {
    pub const ALL: [Approach; 4] = [
        Approach::Adaptive,
        Approach::InitialOnly,
        Approach::OfflineTrained,
        Approach::Ideal,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Approach::Adaptive => "adaptive",
            Approach::InitialOnly => "initial-only",
            Approach::OfflineTrained => "offline-trained",
            Approach::Ideal => "ideal",
        }
    }

    pub fn roman(&self) -> &'static str {
        match self {
            Approach::Adaptive => "i",
            Approach::InitialOnly => "ii",
            Approach::OfflineTrained => "iii",
            Approach::Ideal => "iv",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Approach::ALL
            .into_iter()
            .find(|a| a.roman() == s || a.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown approach `{s}`")))
    }
}

/// One step of the feed disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceStep {
    pub time: f64,
    pub x_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Simulated time (s).
    pub duration: f64,
    /// Feed composition before the first step; the column starts at the
    /// steady state meeting the set-points for this feed.
    pub initial_x_f: f64,
    pub disturbance: Vec<DisturbanceStep>,
    pub sp_d: f64,
    pub sp_b: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            duration: 7200.0,
            initial_x_f: 0.32,
            disturbance: vec![
                DisturbanceStep { time: 500.0, x_f: 0.26 },
                DisturbanceStep { time: 2000.0, x_f: 0.36 },
                DisturbanceStep { time: 4500.0, x_f: 0.30 },
            ],
            sp_d: 0.99995,
            sp_b: 0.00005,
            seed: 42,
        }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.duration > 0.0) {
            return bad("scenario duration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.initial_x_f) {
            return bad("initial_x_f outside [0, 1]".into());
        }
        let mut last = 0.0;
        for d in &self.disturbance {
            if !(d.time > last && d.time <= self.duration) {
                return bad(format!("disturbance at t = {} is out of order or outside the run", d.time));
            }
            if !(0.0..=1.0).contains(&d.x_f) {
                return bad(format!("disturbance x_f = {} outside [0, 1]", d.x_f));
            }
            last = d.time;
        }
        if !(0.0 < self.sp_b && self.sp_b < self.sp_d && self.sp_d < 1.0) {
            return bad("set-points must satisfy 0 < sp_b < sp_d < 1".into());
        }
        Ok(())
    }

    /// Feed composition in effect at time `t` (left-continuous steps).
    pub fn x_f_at(&self, t: f64) -> f64 {
        self.disturbance
            .iter()
            .filter(|d| d.time < t)
            .last()
            .map_or(self.initial_x_f, |d| d.x_f)
    }
}
