use approx::assert_abs_diff_eq;
use kinlab::geometry::Vec3;
use kinlab::transport::*;
use kinlab::Geometry;
use proptest::prelude::*;
use std::sync::Arc;
use std::time::Instant;

fn spec(n_r: usize, n_theta: usize, n_omega: usize, interpolation: Interpolation) -> TransportGridSpec {
    TransportGridSpec { radial: RadialSpacing::Uniform { n: n_r }, n_theta, n_omega, interpolation, ..Default::default() }
}

fn problem(geometry: Geometry, eps: f64, g: impl Fn(&Vec3, &Vec3) -> f64 + Send + Sync + 'static) -> KineticProblem {
    KineticProblem { geometry, eps, boundary: Arc::new(g), source: None }
}

fn bumpy(x: &Vec3, w: &Vec3) -> f64 {
    let th = x.y.atan2(x.x);
    0.5 + 0.3 * (2.0 * th).cos() * w.x + 0.2 * (3.0 * th).sin() * w.y * w.y
}

#[test]
fn constant_data_is_reproduced() {
    let cases = [
        (Geometry::disk(1.0).unwrap(), Interpolation::Linear),
        (Geometry::disk(1.0).unwrap(), Interpolation::Spectral),
        (Geometry::annulus(0.4, 1.0).unwrap(), Interpolation::Linear),
        (Geometry::annulus(0.4, 1.0).unwrap(), Interpolation::Spectral),
    ];
    for (geom, interp) in cases {
        let f = steady_solve(&problem(geom, 0.1, |_, _| 7.0), &spec(12, 16, 32, interp), &SolveControl::default()).unwrap();
        let err = f.values.iter().map(|v| (v - 7.0).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{geom:?} {interp:?}: {err:e}");
    }
    let ball = Geometry::ball(1.0).unwrap();
    let s = TransportGridSpec { radial: RadialSpacing::Uniform { n: 6 }, n_theta: 6, n_mu: 4, n_azimuth: 8, ..Default::default() };
    let f = steady_solve(&problem(ball, 0.2, |_, _| 7.0), &s, &SolveControl::default()).unwrap();
    assert!(f.values.iter().all(|v| (v - 7.0).abs() < 1e-10));
}

#[test]
fn zero_data_gives_zero() {
    let f = steady_solve(&problem(Geometry::disk(1.0).unwrap(), 0.1, |_, _| 0.0), &spec(8, 8, 16, Interpolation::Linear), &SolveControl::default()).unwrap();
    assert!(f.values.iter().all(|v| *v == 0.0));
}

#[test]
fn weights_sum_to_one_and_average_constants() {
    let f = steady_solve(&problem(Geometry::disk(1.0).unwrap(), 0.1, |_, _| 2.5), &spec(6, 8, 16, Interpolation::Linear), &SolveControl::default()).unwrap();
    assert_abs_diff_eq!(f.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(f.angular_measure(), std::f64::consts::TAU);
    let s = TransportGridSpec { radial: RadialSpacing::Uniform { n: 4 }, n_theta: 4, n_mu: 6, n_azimuth: 8, ..Default::default() };
    let b = BallTransport::new(Geometry::ball(1.0).unwrap(), 0.3, &s).unwrap();
    assert_abs_diff_eq!(b.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    for avg in f.average() {
        assert_abs_diff_eq!(avg, 2.5, epsilon = 1e-12);
    }
}

#[test]
fn single_sweep_is_the_exit_attenuation() {
    let geom = Geometry::disk(1.0).unwrap();
    let eps = 0.2;
    let sp = spec(8, 8, 16, Interpolation::Linear);
    let grid = PolarGrid::new(geom, &sp).unwrap();
    let f = steady_sweep(&problem(geom, eps, |_, _| 1.0), &sp, &vec![0.0; grid.n_nodes()]).unwrap();
    for (n, x) in f.nodes.iter().enumerate() {
        for (k, w) in f.ordinates.iter().enumerate() {
            let e = exit_time(&geom, x, w, eps).unwrap();
            let want = if e.t_b > 40.0 { 0.0 } else { (-e.t_b).exp() };
            assert_abs_diff_eq!(f.value(n, k), want, epsilon = 1e-14);
            assert!(f.value(n, k) > 0.0 && f.value(n, k) <= 1.0);
        }
    }
}

#[test]
fn sweep_with_consistent_average_is_a_fixed_point() {
    let geom = Geometry::disk(1.0).unwrap();
    let sp = spec(10, 16, 32, Interpolation::Linear);
    let p = problem(geom, 0.1, bumpy);
    let f = steady_solve(&p, &sp, &SolveControl::default()).unwrap();
    let g = steady_sweep(&p, &sp, &f.ubar).unwrap();
    let d = f.values.iter().zip(&g.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d < 1e-12, "{d:e}");
    assert!(f.residual < 1e-12);
}

#[test]
fn maximum_principle_for_bounded_data() {
    for (geom, interp) in [
        (Geometry::disk(1.0).unwrap(), Interpolation::Linear),
        (Geometry::annulus(0.5, 1.0).unwrap(), Interpolation::Linear),
    ] {
        let p = problem(geom, 0.05, |x, w| if x.x * w.y - x.y * w.x > 0.0 { 1.0 } else { 0.0 });
        let f = steady_solve(&p, &spec(16, 16, 32, interp), &SolveControl::default()).unwrap();
        let (lo, hi) = f.min_max();
        assert!(lo >= -1e-12 && hi <= 1.0 + 1e-12, "{lo} {hi}");
    }
}

#[test]
fn rotationally_invariant_data_give_invariant_fields() {
    // g depends only on the angle between w and the inward normal
    let g = |x: &Vec3, w: &Vec3| {
        let c = -(x.x * w.x + x.y * w.y) / x.x.hypot(x.y);
        let s = x.x * w.y - x.y * w.x;
        1.0 + c * c + 0.3 * s
    };
    for interp in [Interpolation::Linear, Interpolation::Spectral] {
        let sp = spec(10, 16, 32, interp);
        let f = steady_solve(&problem(Geometry::disk(1.0).unwrap(), 0.1, g), &sp, &SolveControl::default()).unwrap();
        let (nt, no, m) = (16, 32, 2);
        for i in 0..10 {
            for a in 0..nt {
                for k in 0..no {
                    let base = f.values[(i * nt) * no + k];
                    let rot = f.values[(i * nt + a) * no + (k + a * m) % no];
                    assert!((base - rot).abs() < 1e-11, "{interp:?} {i} {a} {k}");
                }
            }
        }
    }
}

#[test]
fn ball_maximum_principle_and_symmetry() {
    let s = TransportGridSpec { radial: RadialSpacing::Uniform { n: 6 }, n_theta: 6, n_mu: 6, n_azimuth: 8, ..Default::default() };
    // axisymmetric datum, even under z → −z
    let p = problem(Geometry::ball(1.0).unwrap(), 0.2, |x, _| x.z * x.z);
    let f = steady_solve(&p, &s, &SolveControl::default()).unwrap();
    let (lo, hi) = f.min_max();
    assert!(lo >= -1e-12 && hi <= 1.0 + 1e-12);
    // ū at polar angle θ_j equals ū at π − θ_j
    for i in 0..6 {
        for j in 0..3 {
            assert_abs_diff_eq!(f.ubar[i * 6 + j], f.ubar[i * 6 + 5 - j], epsilon = 1e-10);
        }
    }
}

#[test]
fn spectral_and_linear_agree_on_smooth_data() {
    let geom = Geometry::disk(1.0).unwrap();
    let p = problem(geom, 0.1, bumpy);
    let lin = steady_solve(&p, &spec(24, 32, 64, Interpolation::Linear), &SolveControl::default()).unwrap();
    let spc = steady_solve(&p, &spec(24, 32, 64, Interpolation::Spectral), &SolveControl::default()).unwrap();
    let d = lin.ubar.iter().zip(&spc.ubar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d < 2e-2, "{d}");
}

#[test]
fn greens_identity_residual_vanishes_for_constants_and_shrinks() {
    let geom = Geometry::disk(1.0).unwrap();
    let c = steady_solve(&problem(geom, 0.1, |_, _| 2.0), &spec(8, 8, 16, Interpolation::Linear), &SolveControl::default()).unwrap();
    assert!(greens_identity_residual(&c, &c).unwrap() < 1e-12);

    let residual = |n: usize| {
        let f = steady_solve(&problem(geom, 0.1, |_, _| 0.0), &spec(n, n, 2 * n, Interpolation::Linear), &SolveControl::default()).unwrap();
        let mut u = f.clone();
        let mut v = f.clone();
        for (idx, x) in f.nodes.iter().enumerate() {
            for (k, w) in f.ordinates.iter().enumerate() {
                u.values[idx * f.n_ordinates() + k] = x.x * w.x + x.y * x.y;
                v.values[idx * f.n_ordinates() + k] = (0.4 * x.x + 0.3 * x.y * w.x + 0.2 * w.y).exp();
            }
        }
        greens_identity_residual(&u, &v).unwrap()
    };
    let (coarse, fine) = (residual(8), residual(16));
    assert!(fine < 0.5 * coarse, "{coarse:e} {fine:e}");
}

#[test]
fn unsteady_constants_stay_constant() {
    let p = UnsteadyProblem {
        geometry: Geometry::disk(1.0).unwrap(),
        eps: 0.1,
        boundary: Arc::new(|_, _, _| 4.0),
        initial: Arc::new(|_, _| 4.0),
    };
    let sched = TimeSchedule { dtau: 0.5, ..Default::default() };
    let tr = unsteady_solve(&p, &spec(8, 8, 16, Interpolation::Linear), &sched, &[0.0, 1.0, 20.0]).unwrap();
    assert_eq!(tr.compatibility_violation, 0.0);
    assert_eq!(tr.snapshots.len(), 3);
    for s in &tr.snapshots {
        assert!(s.field.values.iter().all(|v| (v - 4.0).abs() < 1e-10));
    }
}

#[test]
fn unsteady_anisotropy_relaxes_like_the_fast_exponential() {
    let eps = 0.01;
    let p = UnsteadyProblem {
        geometry: Geometry::disk(1.0).unwrap(),
        eps,
        boundary: Arc::new(|_, _, _| 1.0),
        initial: Arc::new(|_, w| 1.0 + 0.5 * w.x),
    };
    let dtau = 0.05;
    let sched = TimeSchedule { dtau, coarsen_after: 1e9, ..Default::default() };
    let taus = [0.0, 1.0, 2.0];
    let tr = unsteady_solve(&p, &spec(8, 8, 16, Interpolation::Linear), &sched, &taus).unwrap();
    assert!(tr.compatibility_violation > 0.4);
    for s in &tr.snapshots {
        // interior node far from the boundary: travel distance ε τ is tiny
        let f = &s.field;
        let want = 0.5 * (1.0 + dtau).powf(-s.tau / dtau);
        let node = 2 * 8;
        for (k, w) in f.ordinates.iter().enumerate() {
            let dev = f.value(node, k) - f.ubar[node];
            assert!((dev - want * w.x).abs() < 2e-3, "tau {} k {k}: {dev} vs {}", s.tau, want * w.x);
        }
    }
}

#[test]
fn unsteady_step_halving_converges() {
    let run = |dtau: f64| {
        let p = UnsteadyProblem {
            geometry: Geometry::disk(1.0).unwrap(),
            eps: 0.2,
            boundary: Arc::new(|_, x, _| 1.0 + 0.5 * x.x),
            initial: Arc::new(|x, _| 1.0 + 0.5 * x.x),
        };
        let sched = TimeSchedule { dtau, coarsen_after: 1e9, ..Default::default() };
        unsteady_solve(&p, &spec(6, 8, 16, Interpolation::Linear), &sched, &[2.0]).unwrap().snapshots[0].field.values.clone()
    };
    let (a, b, c) = (run(0.1), run(0.05), run(0.025));
    let d1 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let d2 = b.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(d2 < 0.6 * d1 && d2 > 0.4 * d1, "{d1:e} {d2:e}");
}

#[test]
fn unsupported_combinations_are_reported() {
    let p = UnsteadyProblem {
        geometry: Geometry::disk(1.0).unwrap(),
        eps: 0.1,
        boundary: Arc::new(|_, _, _| 0.0),
        initial: Arc::new(|_, _| 0.0),
    };
    let r = unsteady_solve(&p, &spec(6, 8, 16, Interpolation::Spectral), &TimeSchedule::default(), &[1.0]);
    assert!(matches!(r, Err(TransportError::Unsupported(_))));
    assert!(matches!(PolarGrid::new(Geometry::disk(1.0).unwrap(), &spec(6, 6, 16, Interpolation::Linear)), Err(TransportError::Invalid(_))));
    let outside = exit_time(&Geometry::disk(1.0).unwrap(), &Vec3::new(2.0, 0.0, 0.0), &Vec3::new(1.0, 0.0, 0.0), 0.1);
    assert!(matches!(outside, Err(TransportError::Outside(_))));
}

#[test]
fn csv_dump_has_one_row_per_node_and_ordinate() {
    let f = steady_solve(&problem(Geometry::disk(1.0).unwrap(), 0.1, |_, _| 1.0), &spec(4, 4, 8, Interpolation::Linear), &SolveControl::default()).unwrap();
    let mut buf = Vec::new();
    f.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x,y,wx,wy,u");
    assert_eq!(text.lines().count(), 1 + 16 * 8);
}

#[test]
fn desk_scale_disk_is_fast() {
    let t0 = Instant::now();
    let p = problem(Geometry::disk(1.0).unwrap(), 0.05, bumpy);
    let f = steady_solve(&p, &spec(64, 64, 64, Interpolation::Linear), &SolveControl::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (lo, hi) = f.min_max();
    assert!(lo >= 0.0 - 1e-10 && hi <= 1.0 + 1e-10);
    assert!(secs < 60.0, "{secs}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exit_footpoint_lies_on_the_boundary(r in 0.0..0.999f64, th in 0.0..6.28f64, om in 0.0..6.28f64, eps in 0.01..1.0f64) {
        let geom = Geometry::disk(1.3).unwrap();
        let x = Vec3::new(1.3 * r * th.cos(), 1.3 * r * th.sin(), 0.0);
        let w = Vec3::new(om.cos(), om.sin(), 0.0);
        let e = exit_time(&geom, &x, &w, eps).unwrap();
        prop_assert!((e.foot.norm() - 1.3).abs() < 1e-12);
        prop_assert!(e.foot.dot(&w) <= 1e-12);
        prop_assert!((e.t_b * eps - e.length).abs() < 1e-12 * (1.0 + e.length));
    }

    #[test]
    fn annulus_footpoints_are_on_one_of_the_circles(r in 0.51..0.999f64, th in 0.0..6.28f64, om in 0.0..6.28f64) {
        let geom = Geometry::annulus(0.5, 1.0).unwrap();
        let x = Vec3::new(r * th.cos(), r * th.sin(), 0.0);
        let w = Vec3::new(om.cos(), om.sin(), 0.0);
        let e = exit_time(&geom, &x, &w, 1.0).unwrap();
        let n = e.foot.norm();
        prop_assert!((n - 1.0).abs() < 1e-12 || (n - 0.5).abs() < 1e-12);
        // the open segment stays inside
        let mid = x - 0.5 * e.length * w;
        prop_assert!(mid.norm() > 0.5 - 1e-12);
    }

    #[test]
    fn steady_fields_obey_the_maximum_principle(c in proptest::collection::vec(-1.0..1.0f64, 4), eps in 0.05..0.5f64) {
        let g = move |x: &Vec3, w: &Vec3| {
            let th = x.y.atan2(x.x);
            let raw = c[0] * th.cos() + c[1] * (2.0 * th).sin() + c[2] * w.x + c[3] * w.x * w.y;
            raw.tanh()
        };
        let sp = spec(6, 8, 16, Interpolation::Linear);
        let f = steady_solve(&problem(Geometry::disk(1.0).unwrap(), eps, g.clone()), &sp, &SolveControl::default()).unwrap();
        let (lo, hi) = f.min_max();
        // every value is a convex combination of sampled boundary values
        let grid = PolarGrid::new(Geometry::disk(1.0).unwrap(), &sp).unwrap();
        let mut gmin = f64::INFINITY;
        let mut gmax = f64::NEG_INFINITY;
        for n in 0..f.n_nodes() {
            for k in 0..f.n_ordinates() {
                let x = &f.nodes[n];
                let w = grid.ordinate(k);
                let e = exit_time(&f.geometry, x, &w, eps).unwrap();
                let v = g(&e.foot, &w);
                gmin = gmin.min(v);
                gmax = gmax.max(v);
            }
        }
        prop_assert!(lo >= gmin - 1e-12 && hi <= gmax + 1e-12);
    }
}
