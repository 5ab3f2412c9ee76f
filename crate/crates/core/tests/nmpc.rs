use hycol_core::column::{operating_point_for_products, steady_state_solve, AggregationLayout, ColumnInputs, ColumnParams};
use hycol_core::hybrid::OracleSections;
use hycol_core::nmpc::{
    objective, objective_and_gradient, solve_ocp, ControlMoves, ControllerModel, FullOrderModel, HybridModel, OcpSpec,
};
use hycol_core::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Frozen products: the state never moves.
struct Frozen;

impl ControllerModel for Frozen {
    fn dim(&self) -> usize {
        2
    }
    fn product_indices(&self) -> (usize, usize) {
        (1, 0)
    }
    fn rhs(&self, _x: &DVector<f64>, _l: f64, _v: f64) -> Result<DVector<f64>> {
        Ok(DVector::zeros(2))
    }
    fn state_jacobian(&self, _x: &DVector<f64>, _l: f64, _v: f64) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(2, 2))
    }
    fn input_jacobian(&self, _x: &DVector<f64>, _l: f64, _v: f64) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(2, 2))
    }
}

fn random_moves(rng: &mut ChaCha8Rng, spec: &OcpSpec) -> ControlMoves {
    ControlMoves(
        (0..spec.n)
            .map(|_| {
                (
                    rng.gen_range(spec.bounds_l.0..spec.bounds_l.1),
                    rng.gen_range(spec.bounds_v.0..spec.bounds_v.1),
                )
            })
            .collect(),
    )
}

#[test]
fn constant_deviation_integrates_in_closed_form() {
    let spec = OcpSpec::for_params(&ColumnParams::default());
    let delta = 3e-4;
    let x0 = DVector::from_vec(vec![spec.sp_b, spec.sp_d - delta]);
    let moves = ControlMoves::constant(2.0, 2.4, spec.n);
    let (phi, g) = objective_and_gradient(&moves, &x0, &Frozen, &spec).unwrap();
    assert!((phi - delta * delta * spec.t_p).abs() <= 1e-12 * phi);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn pinned_at_set_points_costs_nothing() {
    let p = ColumnParams::default();
    let spec = OcpSpec::for_params(&p);
    let (l, v, x) = operating_point_for_products(spec.sp_d, spec.sp_b, p.feed_comp_nominal, &p).unwrap();
    let model = FullOrderModel { params: p.clone(), x_f: p.feed_comp_nominal };
    let (phi, g) = objective_and_gradient(&ControlMoves::constant(l, v, spec.n), &x, &model, &spec).unwrap();
    assert!(phi <= 1e-15, "{phi}");
    assert!(g.iter().all(|v| v.abs() <= 1e-9), "{g:?}");
    // the warm start is already optimal
    let sol = solve_ocp(&x, &model, &spec, &ControlMoves::constant(l, v, spec.n)).unwrap();
    assert!(sol.iterations <= 1, "{sol:?}");
    for (a, b) in sol.moves.0.iter().zip(std::iter::repeat((l, v))) {
        assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
    }
}

fn fd_gradient_check(model: &dyn ControllerModel, x0: &DVector<f64>, spec: &OcpSpec, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moves = random_moves(&mut rng, spec);
    let (_, g) = objective_and_gradient(&moves, x0, model, spec).unwrap();
    let flat = moves.flat();
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..flat.len() {
        let h = 1e-5;
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += h;
        minus[i] -= h;
        let unflat = |f: &[f64]| ControlMoves(f.chunks(2).map(|c| (c[0], c[1])).collect());
        let fp = objective(&unflat(&plus), x0, model, spec).unwrap();
        let fm = objective(&unflat(&minus), x0, model, spec).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - g[i]).abs() <= 1e-4 * gmax, "entry {i}: fd {fd} vs {}", g[i]);
    }
}

#[test]
fn full_order_gradient_matches_finite_differences() {
    let p = ColumnParams::default();
    let mut spec = OcpSpec::for_params(&p);
    spec.rel_tol = 1e-9;
    spec.abs_tol = 1e-13;
    let x0 = steady_state_solve(&ColumnInputs::new(2.0, 2.38, 1.0, 0.32), &p).unwrap();
    let model = FullOrderModel { params: p.clone(), x_f: 0.3 };
    fd_gradient_check(&model, &x0, &spec, 1);
}

#[test]
fn hybrid_gradient_matches_finite_differences() {
    let p = ColumnParams::default();
    let mut spec = OcpSpec::for_params(&p);
    spec.rel_tol = 1e-9;
    spec.abs_tol = 1e-13;
    let layout = AggregationLayout::default_for(&p).unwrap();
    let x0 = layout.restrict(&steady_state_solve(&ColumnInputs::new(2.0, 2.38, 1.0, 0.32), &p).unwrap());
    let model = HybridModel::new(p.clone(), layout, OracleSections { alpha: p.alpha }, 0.3);
    fd_gradient_check(&model, &x0, &spec, 2);
}

#[test]
fn ideal_controller_rejects_a_feed_step() {
    let p = ColumnParams::default();
    let spec = OcpSpec::for_params(&p);
    let (l, v, x) = operating_point_for_products(spec.sp_d, spec.sp_b, p.feed_comp_nominal, &p).unwrap();
    let model = FullOrderModel { params: p.clone(), x_f: 0.36 };
    let hold = ControlMoves::constant(l, v, spec.n);
    let idle = objective(&hold, &x, &model, &spec).unwrap();
    let sol = solve_ocp(&x, &model, &spec, &hold).unwrap();
    assert!(sol.objective <= 0.5 * idle, "{} vs {idle}: {sol:?}", sol.objective);
    assert!(sol.history.windows(2).all(|w| w[1] <= w[0]));
    for &(l, v) in &sol.moves.0 {
        assert!(p.within_bounds(l, v));
    }
}
