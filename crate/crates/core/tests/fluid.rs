use approx::assert_abs_diff_eq;
use kinlab::fluid::*;
use kinlab::geometry::Vec3;
use kinlab::Geometry;
use proptest::prelude::*;
use std::f64::consts::TAU;
use std::sync::Arc;

fn disk_problem(radius: f64, d: impl Fn(&Vec3) -> f64 + Send + Sync + 'static) -> DirichletProblem {
    DirichletProblem { geometry: Geometry::disk(radius).unwrap(), boundary: Arc::new(d) }
}

fn sample_points(radius: f64) -> Vec<Vec3> {
    let mut pts = Vec::new();
    for i in 0..9 {
        for a in 0..13 {
            let r = radius * i as f64 / 8.0 * 0.999;
            let t = TAU * a as f64 / 13.0 + 0.1;
            pts.push(Vec3::new(r * t.cos(), r * t.sin(), 0.0));
        }
    }
    pts
}

#[test]
fn modal_disk_reproduces_harmonic_polynomials() {
    for k in 0..=8i32 {
        for radius in [1.0, 2.0] {
            let f = laplace_solve(
                &disk_problem(radius, move |x| {
                    let t = x.y.atan2(x.x);
                    (k as f64 * t).cos() + 0.5 * (k as f64 * t).sin()
                }),
                64,
            )
            .unwrap();
            for x in sample_points(radius) {
                let r = x.norm() / radius;
                let t = x.y.atan2(x.x);
                let want = r.powi(k) * ((k as f64 * t).cos() + 0.5 * (k as f64 * t).sin());
                assert_abs_diff_eq!(f.value(&x), want, epsilon = 1e-10);
            }
        }
    }
}

#[test]
fn modal_gradients_match_differences() {
    let f = laplace_solve(&disk_problem(1.5, |x| (x.x * 0.7).exp() * (x.y).cos()), 64).unwrap();
    let x = Vec3::new(0.4, -0.3, 0.0);
    let h = 1e-6;
    let g = f.gradient(&x);
    for axis in 0..2 {
        let mut e = Vec3::zeros();
        e[axis] = h;
        let fd = (f.value(&(x + e)) - f.value(&(x - e))) / (2.0 * h);
        assert_abs_diff_eq!(g[axis], fd, epsilon = 1e-7);
    }
}

#[test]
fn constant_data_extend_to_constants() {
    for geometry in [Geometry::disk(1.0).unwrap(), Geometry::annulus(0.3, 1.0).unwrap(), Geometry::ball(2.0).unwrap()] {
        let f = laplace_solve(&DirichletProblem { geometry, boundary: Arc::new(|_| 4.25) }, 16).unwrap();
        for x in [Vec3::new(0.5, 0.1, 0.0), Vec3::new(-0.2, 0.6, 0.0)] {
            assert_abs_diff_eq!(f.value(&x), 4.25, epsilon = 1e-13);
            assert!(f.gradient(&x).norm() < 1e-13);
        }
    }
}

#[test]
fn annulus_log_and_multipole_modes() {
    // u = 1 + 2 ln r + (r + 1/r) cos θ is harmonic
    let exact = |x: &Vec3| {
        let r = x.x.hypot(x.y);
        1.0 + 2.0 * r.ln() + (r + 1.0 / r) * x.x / r
    };
    let geometry = Geometry::annulus(0.5, 2.0).unwrap();
    let f = laplace_solve(&DirichletProblem { geometry, boundary: Arc::new(exact) }, 32).unwrap();
    for x in [Vec3::new(0.7, 0.2, 0.0), Vec3::new(-1.2, 1.1, 0.0), Vec3::new(0.0, -1.9, 0.0)] {
        assert_abs_diff_eq!(f.value(&x), exact(&x), epsilon = 1e-12);
    }
}

#[test]
fn ball_axisymmetric_harmonics() {
    // r² P₂(cos θ) = z² − (x² + y²)/2
    let exact = |x: &Vec3| x.z * x.z - 0.5 * (x.x * x.x + x.y * x.y) + 0.3 * x.z;
    let f = laplace_solve(&DirichletProblem { geometry: Geometry::ball(1.0).unwrap(), boundary: Arc::new(exact) }, 16).unwrap();
    for x in [Vec3::new(0.2, 0.1, 0.3), Vec3::new(-0.5, 0.0, -0.4), Vec3::zeros()] {
        assert_abs_diff_eq!(f.value(&x), exact(&x), epsilon = 1e-13);
        let g = f.gradient(&x);
        let want = Vec3::new(-x.x, -x.y, 2.0 * x.z + 0.3);
        assert_abs_diff_eq!((g - want).norm(), 0.0, epsilon = 1e-12);
    }
}

#[test]
fn finite_differences_are_second_order() {
    let exact = |x: &Vec3| x.x * x.x * x.x - 3.0 * x.x * x.y * x.y + 0.5 * x.y;
    let p = disk_problem(1.0, exact);
    let err = |n: usize| {
        let mesh = PolarMesh::new(1.0, n, 32).unwrap();
        let f = laplace_solve_fd(&p, &mesh).unwrap();
        let InteriorField::Grid(g) = f else { unreachable!() };
        (0..mesh.r.len())
            .flat_map(|i| (0..32).map(move |a| (i, a)))
            .map(|(i, a)| (g.values[i * 32 + a] - exact(&mesh.node(i, a))).abs())
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (err(16), err(32));
    let order = (e1 / e2).log2();
    assert!(order > 1.8, "{e1:e} {e2:e} order {order}");
}

#[test]
fn fd_solver_is_off_disk_unsupported() {
    let p = DirichletProblem { geometry: Geometry::ball(1.0).unwrap(), boundary: Arc::new(|_| 0.0) };
    assert!(matches!(laplace_solve_fd(&p, &PolarMesh::new(1.0, 8, 8).unwrap()), Err(FluidError::Unsupported(_))));
}

#[test]
fn bessel_mode_decays_at_one_third_rate() {
    let geometry = Geometry::disk(1.0).unwrap();
    let problem = HeatProblem {
        geometry,
        boundary: Arc::new(|_, _| 0.0),
        initial: Arc::new(|x| bessel_j0(J0_FIRST_ZERO * x.norm())),
        diffusivity: 1.0 / 3.0,
    };
    let mesh = PolarMesh::new(1.0, 64, 8).unwrap();
    let times: Vec<f64> = (0..6).map(|k| 0.2 * k as f64).collect();
    let snaps = heat_solve(&problem, &mesh, 0.005, &times).unwrap();
    let t: Vec<f64> = snaps.iter().map(|s| s.t).collect();
    let y: Vec<f64> = snaps.iter().map(|s| s.field.values[0].ln()).collect();
    let (slope, _, _, r2) = kinlab::quadrature::linear_fit(&t, &y);
    let want = J0_FIRST_ZERO * J0_FIRST_ZERO / 3.0;
    assert!((-slope - want).abs() < 0.02 * want, "rate {} vs {want}", -slope);
    // the unscaled heat equation would decay three times faster
    assert!((-slope - 3.0 * want).abs() > 0.5 * want);
    assert!(r2 > 0.9999);
}

#[test]
fn heat_preserves_constants_and_steady_states() {
    let mesh = PolarMesh::new(1.0, 24, 16).unwrap();
    let c = HeatProblem {
        geometry: Geometry::disk(1.0).unwrap(),
        boundary: Arc::new(|_, _| 2.0),
        initial: Arc::new(|_| 2.0),
        diffusivity: 1.0 / 3.0,
    };
    let s = heat_solve(&c, &mesh, 0.01, &[0.5]).unwrap();
    assert!(s[0].field.values.iter().all(|v| (v - 2.0).abs() < 1e-12));

    // the discrete harmonic extension does not move
    let d = |x: &Vec3| x.x * x.y + 0.3 * x.x;
    let InteriorField::Grid(steady) = laplace_solve_fd(&disk_problem(1.0, d), &mesh).unwrap() else { unreachable!() };
    let vals = steady.values.clone();
    let m2 = mesh.clone();
    let p = HeatProblem {
        geometry: Geometry::disk(1.0).unwrap(),
        boundary: Arc::new(move |_, x| d(x)),
        initial: Arc::new(move |x| {
            // exact nodal lookup
            let r = x.x.hypot(x.y);
            let i = m2.r.iter().position(|ri| (ri - r).abs() < 1e-12).unwrap();
            let a = ((x.y.atan2(x.x) / TAU * 16.0).round() as i64).rem_euclid(16) as usize;
            vals[i * 16 + a]
        }),
        diffusivity: 1.0 / 3.0,
    };
    let s = heat_solve(&p, &mesh, 0.05, &[1.0]).unwrap();
    let diff = s[0].field.values.iter().zip(&steady.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-8, "{diff:e}");
}

#[test]
fn heat_relaxes_to_the_harmonic_extension() {
    let d = |x: &Vec3| 1.0 + x.x - 0.5 * (x.x * x.x - x.y * x.y);
    let mesh = PolarMesh::new(1.0, 32, 16).unwrap();
    let p = HeatProblem { geometry: Geometry::disk(1.0).unwrap(), boundary: Arc::new(move |_, x| d(x)), initial: Arc::new(|_| 0.0), diffusivity: 1.0 / 3.0 };
    let s = heat_solve(&p, &mesh, 0.1, &[20.0]).unwrap();
    let InteriorField::Grid(steady) = laplace_solve_fd(&disk_problem(1.0, d), &mesh).unwrap() else { unreachable!() };
    let diff = s[0].field.values.iter().zip(&steady.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6, "{diff:e}");
}

#[test]
fn heat_rejects_bad_steps() {
    let p = HeatProblem { geometry: Geometry::disk(1.0).unwrap(), boundary: Arc::new(|_, _| 0.0), initial: Arc::new(|_| 0.0), diffusivity: 1.0 / 3.0 };
    let mesh = PolarMesh::new(1.0, 8, 8).unwrap();
    assert!(matches!(heat_solve(&p, &mesh, 0.0, &[1.0]), Err(FluidError::Invalid(_))));
    assert!(matches!(heat_solve(&p, &mesh, -1.0, &[1.0]), Err(FluidError::Invalid(_))));
}

#[test]
fn corrector_for_linear_u0() {
    let geometry = Geometry::disk(1.0).unwrap();
    let u0 = laplace_solve(&disk_problem(1.0, |x| x.x), 32).unwrap();
    let c = interior_corrector_u1(&geometry, &u0, Some(Arc::new(|_| 0.0)), 32).unwrap();
    for (x, w) in [(Vec3::new(0.3, 0.2, 0.0), Vec3::new(0.6, 0.8, 0.0)), (Vec3::zeros(), Vec3::new(-1.0, 0.0, 0.0))] {
        assert_abs_diff_eq!(c.value(&x, &w), -w.x, epsilon = 1e-13);
    }
    let flat = InteriorField::constant(&geometry, 3.0);
    let c = interior_corrector_u1(&geometry, &flat, Some(Arc::new(|_| 0.0)), 32).unwrap();
    assert_eq!(c.value(&Vec3::new(0.1, 0.1, 0.0), &Vec3::new(1.0, 0.0, 0.0)), 0.0);
    let c = interior_corrector_u1(&geometry, &flat, Some(Arc::new(|x: &Vec3| x.y)), 32).unwrap();
    assert_abs_diff_eq!(c.value(&Vec3::new(0.1, 0.4, 0.0), &Vec3::new(1.0, 0.0, 0.0)), 0.4, epsilon = 1e-13);
    assert!(matches!(interior_corrector_u1(&geometry, &flat, None, 32), Err(FluidError::Missing(_))));
}

#[test]
fn modal_coefficients_serialize() {
    let h = HarmonicDisk::from_fn(1.0, |t| t.cos(), 8);
    let text = serde_json::to_string(&h).unwrap();
    let back: HarmonicDisk = serde_json::from_str(&text).unwrap();
    assert_eq!(h, back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn modal_extension_obeys_the_maximum_principle(c in proptest::collection::vec(-1.0..1.0f64, 5), r in 0.0..0.99f64, t in 0.0..6.3f64) {
        // smooth band-limited data: the harmonic extension is the Poisson integral
        let d = move |x: &Vec3| {
            let th = x.y.atan2(x.x);
            c[0] + c[1] * th.cos() + c[2] * (2.0 * th).sin() + c[3] * (3.0 * th).cos() + c[4] * (4.0 * th).sin()
        };
        let d2 = d.clone();
        let f = laplace_solve(&disk_problem(1.0, d), 32).unwrap();
        let samples: Vec<f64> = (0..2000).map(|a| {
            let th = TAU * a as f64 / 2000.0;
            d2(&Vec3::new(th.cos(), th.sin(), 0.0))
        }).collect();
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = f.value(&Vec3::new(r * t.cos(), r * t.sin(), 0.0));
        prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
    }
}
