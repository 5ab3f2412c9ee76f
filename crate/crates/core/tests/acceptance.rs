//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//! Run with `cargo test --release -p hycol-core --test acceptance`.

use std::time::Instant;

use hycol_core::column::{
    full_rhs, section_steady_solve, steady_state_solve, AggregationLayout, ColumnInputs, ColumnParams,
};
use hycol_core::harness::config::{Approach, DisturbanceStep, RunConfig, Scenario};
use hycol_core::harness::offline::generate_offline_dataset;
use hycol_core::harness::report::{run_approaches, Comparison};
use hycol_core::harness::steptests::nominal_point;
use hycol_core::harness::{measure, run_step_tests, FiveNumber, NoiseSource, PiecewiseConstant, Plant};
use hycol_core::hybrid::{hybrid_steady_state, OracleSections};
use hycol_core::learner::{
    grow_and_train, init_new_node, lm_train, replay_sample, weighted_mse, DataPoint, DataStore, Source, TrainConfig,
    TrainingSet,
};
use hycol_core::nmpc::{objective, objective_and_gradient, ControlMoves, ControllerModel, FullOrderModel, HybridModel, OcpSpec};
use hycol_core::pipeline::{estimate_derivatives, reconstruct_training_points};
use hycol_core::surrogate::{untransform, HiddenNode, InputScaling, SurrogateModel};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn steady_state_equivalence() -> Outcome {
    let start = Instant::now();
    let p = ColumnParams::default();
    let layout = AggregationLayout::default_for(&p).map_err(err)?;
    let oracle = OracleSections { alpha: p.alpha };
    let guess = layout.restrict(
        &steady_state_solve(&ColumnInputs::new(2.0, 2.38, p.feed_flow, p.feed_comp_nominal), &p).map_err(err)?,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let n = 60;
    for _ in 0..n {
        let u = ColumnInputs::new(
            rng.gen_range(p.bounds_l.0..p.bounds_l.1),
            rng.gen_range(p.bounds_v.0..p.bounds_v.1),
            p.feed_flow,
            rng.gen_range(0.2..0.45),
        );
        let full = layout.restrict(&steady_state_solve(&u, &p).map_err(err)?);
        let hybrid = hybrid_steady_state(&guess, &u, &oracle, &p, &layout).map_err(err)?;
        worst = worst.max((hybrid - full).amax());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-8 && secs <= 60.0, format!("{n} points, max deviation {worst:.2e}, {secs:.1} s"))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let p = ColumnParams::default();
    let mut spec = OcpSpec::for_params(&p);
    spec.rel_tol = 1e-9;
    spec.abs_tol = 1e-13;
    let layout = AggregationLayout::default_for(&p).map_err(err)?;
    let x_full = steady_state_solve(&ColumnInputs::new(2.0, 2.38, p.feed_flow, 0.32), &p).map_err(err)?;
    let x_red = layout.restrict(&x_full);
    let full = FullOrderModel { params: p.clone(), x_f: 0.3 };
    let hybrid = HybridModel::new(p.clone(), layout, OracleSections { alpha: p.alpha }, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let moves = ControlMoves(
            (0..spec.n)
                .map(|_| (rng.gen_range(spec.bounds_l.0..spec.bounds_l.1), rng.gen_range(spec.bounds_v.0..spec.bounds_v.1)))
                .collect(),
        );
        for (model, x0) in [(&full as &dyn ControllerModel, &x_full), (&hybrid as &dyn ControllerModel, &x_red)] {
            worst = worst.max(fd_relative_error(model, x0, &moves, &spec)?);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-4 && secs <= 300.0,
        format!("10 move vectors x 2 models, max relative error {worst:.2e}, {secs:.1} s"),
    )
}

/// Largest central-difference mismatch relative to the gradient's max norm.
fn fd_relative_error(model: &dyn ControllerModel, x0: &DVector<f64>, moves: &ControlMoves, spec: &OcpSpec) -> Result<f64, String> {
    let (_, g) = objective_and_gradient(moves, x0, model, spec).map_err(err)?;
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let flat = moves.flat();
    let unflat = |f: &[f64]| ControlMoves(f.chunks(2).map(|c| (c[0], c[1])).collect());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = objective(&unflat(&plus), x0, model, spec).map_err(err)?;
        let fm = objective(&unflat(&minus), x0, model, spec).map_err(err)?;
        worst = worst.max(((fp - fm) / (2.0 * h) - g[i]).abs() / gmax);
    }
    Ok(worst)
}

fn conservation() -> Outcome {
    let p = ColumnParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = DVector::from_fn(p.n_total, |_, _| rng.gen_range(0.0..1.0));
        let u = ColumnInputs::new(
            rng.gen_range(p.bounds_l.0..p.bounds_l.1),
            rng.gen_range(p.bounds_v.0..p.bounds_v.1),
            p.feed_flow,
            rng.gen_range(0.0..1.0),
        );
        let d = full_rhs(&x, &u, &p).map_err(err)?;
        let acc: f64 = (0..p.n_total).map(|i| p.holdups[i] * d[i]).sum();
        let net = u.f * u.x_f - u.distillate() * x[p.n_total - 1] - u.bottoms() * x[0];
        worst = worst.max((acc - net).abs());
    }
    ensure(worst <= 1e-12, format!("1000 evaluations, max imbalance {worst:.2e} mol/s"))
}

fn fixture_model<R: Rng>(hidden: usize, rng: &mut R) -> SurrogateModel {
    let mut m = SurrogateModel::constant(1, 0.5, hidden, InputScaling::from_box([-6.0, -6.0, 0.6], [6.0, 6.0, 1.6]));
    for n in &mut m.nodes {
        *n = HiddenNode {
            weights: [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)],
            bias: rng.gen_range(-0.5..0.5),
            output_weight: rng.gen_range(-2.0..2.0),
        };
    }
    m.output_bias = rng.gen_range(-1.0..1.0);
    m
}

fn fixture_set<R: Rng>(n: usize, target: impl Fn(&[f64; 3]) -> f64, rng: &mut R) -> TrainingSet {
    let mut set = TrainingSet::default();
    for i in 0..n {
        let input = [untransform(rng.gen_range(-6.0..6.0)), untransform(rng.gen_range(-6.0..6.0)), rng.gen_range(0.6..1.6)];
        let p = DataPoint {
            t: i as f64,
            input,
            target: target(&input),
            weight: rng.gen_range(0.01..1.0),
            source: Source::ClosedLoop,
        };
        set.push(p, rng.gen_bool(0.3));
    }
    set
}

fn learner_monotonicity() -> Outcome {
    let mut worst_increase = f64::NEG_INFINITY;
    let mut worst_drift = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = fixture_model(rng.gen_range(1..6), &mut rng);
        let noise = rng.gen_range(0.0..0.02);
        let set = fixture_set(60, |x| untransform(teacher.eval_scaled(x) + noise * (x[2] * 37.0).sin()), &mut rng);
        let start = fixture_model(rng.gen_range(1..4), &mut rng);
        let cfg = TrainConfig {
            max_iterations: 25,
            goal_mse: if seed % 2 == 0 { 1e-8 } else { 0.0 },
            new_data_weight_factor: rng.gen_range(1.0..5.0),
            max_nodes: start.hidden_count() + 2,
            ..TrainConfig::default()
        };
        let before = weighted_mse(&start, &set, cfg.new_data_weight_factor).map_err(err)?;
        let (m1, r1) = lm_train(&start, &set, &cfg).map_err(err)?;
        let (m2, r2) = grow_and_train(&start, &set, &cfg, &mut rng).map_err(err)?;
        for (m, r) in [(&m1, &r1), (&m2, &r2)] {
            let after = weighted_mse(m, &set, cfg.new_data_weight_factor).map_err(err)?;
            worst_increase = worst_increase.max(after - before).max(r.final_mse - r.initial_mse);
        }
        // zero residual: targets are the model's own outputs
        let own = TrainingSet::from_points(
            set.points.iter().map(|p| DataPoint { target: m1.eval(&p.input), ..*p }).collect(),
        );
        let grown = init_new_node(&m1.add_node(m1.hidden_count() + 1).map_err(err)?, &own, &cfg, &mut rng).map_err(err)?;
        for p in &own.points {
            worst_drift = worst_drift.max((grown.eval_scaled(&p.input) - m1.eval_scaled(&p.input)).abs());
        }
    }
    ensure(
        worst_increase <= 0.0 && worst_drift <= 1e-10,
        format!("100 fixtures, largest MSE change {worst_increase:.2e}, zero-residual growth drift {worst_drift:.2e}"),
    )
}

fn replay_properties() -> Outcome {
    let mut corners = DataStore::new(1, 1e-3);
    corners.append(
        &(0..8)
            .map(|i| {
                let c = |b: usize| if i & (1 << b) != 0 { 1.0 } else { 0.0 };
                DataPoint { t: i as f64, input: [c(0), c(1), c(2)], target: 0.5, weight: 1.0, source: Source::OpenLoop }
            })
            .collect::<Vec<_>>(),
    );
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = DataStore::new(1, 1e-3);
        let n = rng.gen_range(1..80);
        let pts: Vec<DataPoint> = (0..n)
            .map(|i| DataPoint {
                t: i as f64,
                input: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.5..1.5)],
                target: 0.5,
                weight: 1.0,
                source: Source::ClosedLoop,
            })
            .collect();
        store.append(&pts);
        let m = rng.gen_range(1..60);
        let r = replay_sample(&store, m, &mut rng).map_err(err)?;
        if r.is_empty() || r.len() > m.min(n) {
            return Err(format!("seed {seed}: {} points for M = {m}, store {n}", r.len()));
        }
        for (i, a) in r.iter().enumerate() {
            if !store.points().contains(a) || r[i + 1..].contains(a) {
                return Err(format!("seed {seed}: not a duplicate-free subset"));
            }
        }
        let mut single = DataStore::new(1, 1e-3);
        single.append(&pts[..1]);
        if replay_sample(&single, m, &mut rng).map_err(err)? != pts[..1] {
            return Err(format!("seed {seed}: single-point store"));
        }
        let c = replay_sample(&corners, 64, &mut rng).map_err(err)?;
        if c.len() != 8 {
            return Err(format!("seed {seed}: {} of 8 corners", c.len()));
        }
    }
    Ok("1000 seeds: subset, no duplicates, single point, 8 corners".into())
}

fn offline_accuracy(cfg: &RunConfig) -> (Outcome, Option<hycol_core::harness::OfflineResult>) {
    let start = Instant::now();
    match generate_offline_dataset(cfg, 42) {
        Ok(off) => {
            let secs = start.elapsed().as_secs_f64();
            let worst = off.held_out_mse.iter().cloned().fold(0.0, f64::max);
            let per: Vec<String> = off
                .held_out_mse
                .iter()
                .zip(&off.models)
                .map(|(m, s)| format!("{m:.2e}/{}n", s.hidden_count()))
                .collect();
            let points = off.stores.iter().map(|s| s.len()).min().unwrap_or(0);
            let ok = worst <= 1e-5 && secs <= 600.0 && points == cfg.offline.points_per_section;
            (
                ensure(ok, format!("{points} points/section, held-out MSE [{}], {secs:.0} s", per.join(", "))),
                Some(off),
            )
        }
        Err(e) => (Err(err(e)), None),
    }
}

fn closed_loop_ordering(cmp: &Comparison, secs: f64) -> Outcome {
    let phi = |a| cmp.run(a).map(|r| r.final_phi());
    let slope = |a| cmp.run(a).map(|r| r.final_quarter_slope());
    let (Some(ad), Some(ini), Some(off), Some(id)) =
        (phi(Approach::Adaptive), phi(Approach::InitialOnly), phi(Approach::OfflineTrained), phi(Approach::Ideal))
    else {
        let failed: Vec<String> = cmp.runs.iter().filter_map(|(a, r)| r.as_ref().err().map(|e| format!("{a}: {e}"))).collect();
        return Err(format!("runs failed: {}", failed.join("; ")));
    };
    let (s_ad, s_off) = (slope(Approach::Adaptive).unwrap(), slope(Approach::OfflineTrained).unwrap());
    let checks = [
        ("ideal <= offline", id <= off),
        ("offline <= 1.1 adaptive", off <= 1.1 * ad),
        ("adaptive <= 0.7 initial-only", ad <= 0.7 * ini),
        ("adaptive slope <= 1.5 offline slope", s_ad <= 1.5 * s_off),
        ("runtime <= 30 min", secs <= 1800.0),
    ];
    let missed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "phi_end ideal {id:.3e}, offline {off:.3e}, adaptive {ad:.3e}, initial-only {ini:.3e}; \
         final-quarter slope adaptive {s_ad:.3e}, offline {s_off:.3e}; {secs:.0} s{}",
        if missed.is_empty() { String::new() } else { format!("; missed: {}", missed.join(", ")) }
    );
    ensure(missed.is_empty(), detail)
}

fn pipeline_exactness() -> Outcome {
    let cfg = RunConfig::default();
    let res = cfg.resolve().map_err(err)?;
    let (p, layout) = (&res.params, &res.layout);
    let nominal = nominal_point(&res).map_err(err)?;
    let (l, v) = (nominal.l * 1.01, nominal.v);
    let mut plant = Plant::new(p.clone(), nominal.state.clone(), nominal.l, nominal.v, PiecewiseConstant::new(0.30));
    plant.apply(l, v);
    // settled: largest stage derivative of the true plant below 1e-13 per second
    let u = ColumnInputs::new(l, v, p.feed_flow, 0.30);
    let cap = 1_000_000.0;
    let mut noise = NoiseSource::new(0.0, 0);
    let mut history = Vec::new();
    let mut drift = f64::INFINITY;
    while plant.t < cap && (drift > 1e-13 || history.len() < 3) {
        plant.advance(plant.t + res.ocp.t_s, 2).map_err(err)?;
        history.push(measure(&plant, layout, &mut noise));
        drift = full_rhs(&plant.state, &u, p).map_err(err)?.amax();
    }
    let settle = plant.t;
    if drift > 1e-13 {
        return Err(format!("plant still moving after {settle:.0} s (max derivative {drift:.1e})"));
    }
    let d = estimate_derivatives(&history).map_err(err)?;
    let rec = reconstruct_training_points(history.last().unwrap(), &d, layout, p, cfg.pipeline.kappa).map_err(err)?;
    let mut worst = 0.0f64;
    for (k, sec) in layout.sections.iter().enumerate() {
        let pt = rec.points[k].ok_or_else(|| format!("section {} discarded", k + 1))?;
        let oracle = section_steady_solve(pt.input[0], pt.input[1], pt.input[2], sec.tray_count, p.alpha).map_err(err)?;
        worst = worst.max((pt.target - oracle.x_bot).abs());
    }
    ensure(
        worst <= 1e-8 && rec.weight >= 0.99,
        format!("after {settle:.0} s: max target deviation {worst:.2e}, weight {:.6}", rec.weight),
    )
}

fn soft_timing(cmp: &Comparison, t_s: f64) -> Outcome {
    let mut lines = Vec::new();
    for (a, run) in &cmp.runs {
        let Ok(run) = run else { continue };
        let per_step: Vec<f64> = run.steps.iter().map(|s| s.opt_time_s + s.train_time_s).collect();
        let within = per_step.iter().filter(|&&t| t <= t_s).count();
        let share = 100.0 * within as f64 / per_step.len().max(1) as f64;
        let f = FiveNumber::of(&per_step).map(|f| format!("{:.3}/{:.3}/{:.3}/{:.3}/{:.3}", f.min, f.q25, f.median, f.q75, f.max));
        lines.push(format!(
            "{a}: {share:.1}% of steps within T_s{}, five-number [{}] s",
            if share >= 95.0 { "" } else { " (below 95%, logged)" },
            f.unwrap_or_default()
        ));
    }
    Ok(lines.join("; "))
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.step_tests.trajectories = 4;
    cfg.step_tests.duration = 1200.0;
    let scenario = Scenario {
        duration: 600.0,
        disturbance: vec![DisturbanceStep { time: 120.0, x_f: 0.36 }],
        ..Scenario::default()
    };
    let run = || -> Result<Vec<Vec<u64>>, String> {
        let initial = run_step_tests(&cfg, scenario.seed).map_err(err)?;
        let cmp = run_approaches(&scenario, &cfg, scenario.seed, &[Approach::Adaptive, Approach::Ideal], Some(initial), None)
            .map_err(err)?;
        cmp.runs
            .iter()
            .map(|(_, r)| r.as_ref().map(|r| r.phi.iter().map(|v| v.to_bits()).collect()).map_err(err))
            .collect()
    };
    let (a, b) = (run()?, run()?);
    let n: usize = a.iter().map(|s| s.len()).sum();
    ensure(a == b, format!("adaptive and ideal on a {} s scenario, {n} phi values compared bitwise", scenario.duration))
}

fn report(results: &mut Vec<bool>, label: &str, outcome: Outcome) {
    match outcome {
        Ok(d) => {
            println!("[PASS] {label}: {d}");
            results.push(true);
        }
        Err(d) => {
            println!("[FAIL] {label}: {d}");
            results.push(false);
        }
    }
}

/// Criteria to run: numbers given on the command line, or all of them.
fn selected() -> impl Fn(usize) -> bool {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    move |k| only.is_empty() || only.contains(&k)
}

fn main() {
    let want = selected();
    let mut results = Vec::new();
    if want(1) {
        report(&mut results, "1 steady-state equivalence", steady_state_equivalence());
    }
    if want(2) {
        report(&mut results, "2 gradient fidelity", gradient_fidelity());
    }
    if want(3) {
        report(&mut results, "3 conservation", conservation());
    }
    if want(4) {
        report(&mut results, "4 learner monotonicity", learner_monotonicity());
    }
    if want(5) {
        report(&mut results, "5 replay properties", replay_properties());
    }

    let cfg = RunConfig::default();
    let scenario = Scenario::default();
    let mut offline = None;
    if want(6) {
        let (outcome, o) = offline_accuracy(&cfg);
        report(&mut results, "6 offline surrogate accuracy", outcome);
        offline = o;
    } else if want(7) || want(9) {
        offline = generate_offline_dataset(&cfg, scenario.seed).ok();
    }

    let t_s = cfg.resolve().map(|r| r.ocp.t_s).unwrap_or(60.0);
    let mut cmp = None;
    if want(7) || want(9) {
        let approaches = if offline.is_some() {
            Approach::ALL.to_vec()
        } else {
            vec![Approach::Adaptive, Approach::InitialOnly, Approach::Ideal]
        };
        let start = Instant::now();
        let c = run_approaches(&scenario, &cfg, scenario.seed, &approaches, None, offline);
        cmp = Some((c, start.elapsed().as_secs_f64()));
    }
    if let (true, Some((c, secs))) = (want(7), &cmp) {
        match c {
            Ok(c) => report(&mut results, "7 closed-loop ordering", closed_loop_ordering(c, *secs)),
            Err(e) => report(&mut results, "7 closed-loop ordering", Err(err(e))),
        }
    }
    if want(8) {
        report(&mut results, "8 pipeline exactness", pipeline_exactness());
    }
    if let (true, Some((c, _))) = (want(9), &cmp) {
        match c {
            Ok(c) => report(&mut results, "9 soft timing", soft_timing(c, t_s)),
            Err(e) => report(&mut results, "9 soft timing", Ok(format!("no runs to summarize ({e})"))),
        }
    }
    if want(10) {
        report(&mut results, "10 determinism", determinism());
    }

    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
