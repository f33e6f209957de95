use ergolab::bsde::{interpolate, linearization_field, solve_discounted, GridSpec, SolverParams};
use ergolab::coupling::{discrete_coupling_check, total_variation, TvDecayReport};
use ergolab::ergodic::gaps_decreasing;
use ergolab::forward::uniform_grid;
use ergolab::linalg::norm;
use ergolab::mc::{par_replicas, with_workers};
use ergolab::recurrence::{hitting_monotone, hitting_time_cdf_multi};
use ergolab::report::write_tv;
use ergolab::rng::stream;
use ergolab::scenario::Scenario;
use ergolab::stats::wilson_interval;
use ergolab::{
    build_heat_model, driver_from_control, simulate_path, ControlSpec, DriftField, DriverSpec, Mat, ModelSpec,
    ScalarNonlinearity,
};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, rng_seed: RngSeed::Fixed(0x5eed), failure_persistence: None, ..ProptestConfig::default() }
}

fn actions() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), 1..6)
}

fn control(us: Vec<Vec<f64>>, weight: f64) -> ControlSpec {
    ControlSpec::new(
        us,
        |u| u.to_vec(),
        move |x, u| weight * norm(u) + (x[0] * x[1]).sin().abs(),
        1.0 + 2.0 * weight * 2f64.sqrt(),
    )
    .unwrap()
}

fn ou(a: Vec<f64>, sigma: f64) -> ModelSpec {
    let n = a.len();
    ModelSpec::new(a, Mat::identity(n).scale(sigma)).unwrap()
}

fn vec2() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 2)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn hamiltonian_minimum_is_exact(us in actions(), w in 0.0..1.0f64, x in vec2(), z in vec2()) {
        let spec = control(us, w);
        let h = spec.hamiltonian(&x, &z);
        prop_assert!(h.index < spec.len());
        for (i, u) in spec.controls.iter().enumerate() {
            let v = spec.cost(&x, i) + z[0] * u[0] + z[1] * u[1];
            prop_assert!(v >= h.value - 1e-14);
            if i < h.index {
                prop_assert!(v > h.value);
            }
        }
    }

    #[test]
    fn hamiltonian_is_lipschitz_in_z(us in actions(), x in vec2(), z in vec2(), zp in vec2()) {
        let spec = control(us, 0.3);
        let diff = norm(&[z[0] - zp[0], z[1] - zp[1]]);
        let gap = (spec.hamiltonian(&x, &z).value - spec.hamiltonian(&x, &zp).value).abs();
        prop_assert!(gap <= spec.max_action_norm() * diff + 1e-12);
    }

    #[test]
    fn linearization_reproduces_the_driver_difference(us in actions(), x in vec2(), z in vec2(), zp in vec2()) {
        let driver = driver_from_control(&control(us, 0.1));
        let (za, zb) = (z.clone(), zp.clone());
        let u = linearization_field(&driver, &move |_| za.clone(), &move |_| zb.clone(), &x);
        prop_assert!(norm(&u) <= driver.l + 1e-12);
        let lhs = driver.eval(&x, &z) - driver.eval(&x, &zp);
        let rhs = u[0] * (z[0] - zp[0]) + u[1] * (z[1] - zp[1]);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn constant_noise_gives_scaled_identity(n in 1usize..5, sigma in 0.1..3.0f64) {
        let (model, _) = build_heat_model(n, &ScalarNonlinearity::zero(), &|_| sigma, 16 * n).unwrap();
        prop_assert!(model.g.max_abs_diff(&Mat::identity(n).scale(sigma)) < 1e-10);
        for (k, a) in model.a.iter().enumerate() {
            let expected = -((k + 1) as f64 * std::f64::consts::PI).powi(2);
            prop_assert!((a - expected).abs() < 1e-9 * expected.abs());
        }
    }

    #[test]
    fn wilson_interval_contains_the_estimate(n in 1usize..5000, frac in 0.0..=1.0f64) {
        let k = ((n as f64) * frac).floor() as usize;
        let (lo, hi) = wilson_interval(k, n, 1.96);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }

    #[test]
    fn gaps_decreasing_matches_pairwise_check(gaps in prop::collection::vec(0.0..1.0f64, 0..8)) {
        let expected = gaps.windows(2).all(|w| w[1] <= w[0]);
        prop_assert_eq!(gaps_decreasing(&gaps, 0.0), expected);
        let mut with_nan = vec![f64::NAN];
        with_nan.extend(&gaps);
        prop_assert_eq!(gaps_decreasing(&with_nan, 0.0), expected);
    }

    #[test]
    fn interpolation_is_exact_on_affine_functions(
        nodes in 4usize..12, a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, x in vec2()
    ) {
        let grid = GridSpec::uniform(vec![3.0, 2.0], nodes).unwrap();
        let values: Vec<f64> = (0..grid.len()).map(|i| {
            let p = grid.point(i);
            a * p[0] + b * p[1] + c
        }).collect();
        let y = [x[0], x[1] * 2.0 / 3.0];
        let got = interpolate(&grid, &values, &y);
        prop_assert!((got - (a * y[0] + b * y[1] + c)).abs() < 1e-10);
    }

    #[test]
    fn csv_numbers_round_trip(xs in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
        let report = TvDecayReport {
            times: xs.clone(),
            tv: xs.iter().map(|v| -v).collect(),
            se: xs.iter().map(|v| v.abs()).collect(),
            best_fn: vec![0; xs.len()],
            fit: None,
            normalized_c: None,
            all_zero: false,
        };
        let mut buf = Vec::new();
        write_tv(&mut buf, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<Vec<f64>> = text.lines().skip(1)
            .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
            .collect();
        prop_assert_eq!(rows.len(), xs.len());
        for (r, x) in rows.iter().zip(&xs) {
            prop_assert_eq!(r[0].to_bits(), x.to_bits());
            prop_assert_eq!(r[1], -x);
            prop_assert_eq!(r[2], x.abs());
        }
    }

    #[test]
    fn seed_override_round_trips(seed in 0..=i64::MAX as u64, nodes in 5usize..80) {
        let s = Scenario::builtin("heat", &[format!("seed={seed}"), format!("solver.nodes={nodes}")]).unwrap();
        prop_assert_eq!(s.seed, seed);
        prop_assert_eq!(s.solver.nodes, nodes);
        let back = Scenario::from_toml_str(&s.to_toml().unwrap(), &[]).unwrap();
        prop_assert_eq!(back.to_toml().unwrap(), s.to_toml().unwrap());
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn trajectories_are_determined_by_the_seed(seed in any::<u64>(), x0 in vec2()) {
        let model = ou(vec![-1.0, -3.0], 0.7);
        let drift = DriftField::new(|x, out| { out[0] = x[1].sin(); out[1] = x[0].cos(); }, 1.0, Some(1.0));
        let grid = uniform_grid(0.0, 0.01, 50);
        let a = simulate_path(&model, &drift, &x0, &grid, seed).unwrap();
        let b = simulate_path(&model, &drift, &x0, &grid, seed).unwrap();
        let c = simulate_path(&model, &drift, &x0, &grid, seed ^ 1).unwrap();
        prop_assert_eq!(a.last(), b.last());
        prop_assert_ne!(a.last(), c.last());
    }

    #[test]
    fn noise_free_linear_flow_is_exact(x0 in vec2(), a1 in 0.5..5.0f64, a2 in 0.5..5.0f64) {
        let model = ou(vec![-a1, -a2], 1.0).without_noise();
        let grid = uniform_grid(0.0, 0.05, 20);
        let traj = simulate_path(&model, &DriftField::zero(), &x0, &grid, 0).unwrap();
        for (i, t) in grid.iter().enumerate() {
            let s = traj.state(i);
            prop_assert!((s[0] - x0[0] * (-a1 * t).exp()).abs() < 1e-12);
            prop_assert!((s[1] - x0[1] * (-a2 * t).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn replicas_do_not_depend_on_worker_count(seed in any::<u64>(), workers in 2usize..5) {
        let draw = || par_replicas(200, |i| stream(seed, i as u64).gen::<f64>());
        prop_assert_eq!(with_workers(1, draw), with_workers(workers, draw));
    }

    #[test]
    fn discrete_coupling_meets_with_one_minus_tv(
        raw_p in prop::collection::vec(0.05..1.0f64, 3..6), shift in 0.0..1.0f64, seed in any::<u64>()
    ) {
        let total: f64 = raw_p.iter().sum();
        let p: Vec<f64> = raw_p.iter().map(|v| v / total).collect();
        let mut q: Vec<f64> = p.iter().enumerate().map(|(i, v)| v + shift * i as f64 / p.len() as f64).collect();
        let tq: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= tq);
        let r = discrete_coupling_check(&p, &q, 4000, seed).unwrap();
        prop_assert!((r.tv - total_variation(&p, &q)).abs() < 1e-15);
        let se = ((1.0 - r.tv) * r.tv / 4000.0).sqrt();
        prop_assert!((r.equal_fraction.mean - (1.0 - r.tv)).abs() <= 3.0 * se + 1e-12);
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn hitting_is_monotone_in_time_and_radius(seed in any::<u64>(), start in 0.5..2.0f64) {
        let model = ou(vec![-1.0, -4.0], 0.5);
        let reports = hitting_time_cdf_multi(
            &model, &DriftField::zero(), &[start, -start], &[0.1, 0.3, 0.6], &[0.1, 0.5, 1.0, 2.0], 300, 0.01, seed,
        ).unwrap();
        prop_assert!(hitting_monotone(&reports));
        for r in &reports {
            prop_assert!(r.monotone_in_time());
        }
    }

    #[test]
    fn discounted_value_is_bounded_by_cost_over_alpha(alpha in 0.2..2.0f64, level in 0.1..1.0f64) {
        let model = ou(vec![-1.0], 0.5);
        let driver = DriverSpec::new(move |x, z| level * x[0].tanh() + 0.1 * z[0].clamp(-1.0, 1.0), 0.1);
        let grid = GridSpec::uniform(vec![2.0], 41).unwrap();
        let params = SolverParams { h: 0.05, ..SolverParams::default() };
        let sol = solve_discounted(&model, &DriftField::zero(), &driver, alpha, &grid, &params, None).unwrap();
        prop_assert!(sol.vf.sup_norm() <= level / alpha + 1e-6);
    }
}
