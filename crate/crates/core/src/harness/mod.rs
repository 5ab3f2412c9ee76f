//! Closed-loop experiments: plant replacement, step tests, offline data,
//! the four compared controllers and their logs.

pub mod closed_loop;
pub mod config;
pub mod offline;
pub mod plant;
pub mod report;
pub mod steptests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::column::AggregationLayout;
use crate::pipeline::Measurement;

pub use closed_loop::{run_closed_loop, RunLog, StepRecord};
pub use config::{Approach, RunConfig, Scenario};
pub use offline::{generate_offline_dataset, OfflineResult};
pub use plant::{Plant, PiecewiseConstant, ProductSample};
pub use report::{run_comparison, Comparison, FiveNumber};
pub use steptests::{run_step_tests, InitialModels};

/// Additive Gaussian measurement noise; a zero standard deviation never draws.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    sigma: f64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(sigma: f64, seed: u64) -> Self {
        NoiseSource {
            sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn perturb(&mut self, x: f64) -> f64 {
        if self.sigma > 0.0 {
            let n = Normal::new(0.0, self.sigma).expect("finite sigma");
            (x + n.sample(&mut self.rng)).clamp(0.0, 1.0)
        } else {
            x
        }
    }
}

/// Compositions at the aggregation stages and the flows applied up to now.
pub fn measure(plant: &Plant, layout: &AggregationLayout, noise: &mut NoiseSource) -> Measurement {
    let t = plant.t;
    Measurement {
        t,
        x_agg: layout.restrict(&plant.state).iter().map(|&x| noise.perturb(x)).collect(),
        l: plant.l.at(t),
        v: plant.v.at(t),
        f: plant.params.feed_flow,
    }
}
