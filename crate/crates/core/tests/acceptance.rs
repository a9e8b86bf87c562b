//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use kinlab::asymptotics::{
    convergence_study, decompose_boundary_data, unsteady_study, DecompositionOptions, StudyConfig, UnsteadyConfig,
};
use kinlab::fluid::{bessel_j0, heat_solve, laplace_solve, DirichletProblem, HeatProblem, PolarMesh, J0_FIRST_ZERO};
use kinlab::geometry::Vec3;
use kinlab::milne::*;
use kinlab::parallel::with_workers;
use kinlab::profiles::BoundaryProfile;
use kinlab::quadrature::linear_fit;
use kinlab::transport::{steady_solve, Interpolation, KineticProblem, RadialSpacing, SolveControl, TransportGridSpec};
use kinlab::Geometry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::Arc;
use std::time::Instant;

const MILNE_TOL: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sup_dev(values: &[f64], c: f64) -> f64 {
    values.iter().map(|v| (v - c).abs()).fold(0.0, f64::max)
}

fn milne_constant() -> Outcome {
    let t = Instant::now();
    let sol = milne_solve(
        MilneParams::new(0.1, 1.0, 1.0),
        &MilneGridSpec::sphere(200, 64, 8),
        Arc::new(|_, _| 3.0),
        Source::Zero,
        &SolveOptions::default(),
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let err = sup_dev(&sol.values, 3.0);
    let fl = (sol.f_l - 3.0).abs();
    outcome(err < 1e-8 && fl < 1e-8 && secs < 5.0, format!("sup|f-3| {err:.1e}, |f_L-3| {fl:.1e}, {secs:.2} s"))
}

fn milne_maximum_principle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let spec = MilneGridSpec::sphere(60, 24, 6);
    let op = Arc::new(MilneOperator::build(MilneParams::new(0.1, 1.0, 1.5), &spec).unwrap());
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cut = rng.gen_range(0.1..1.4);
        let cc = c.clone();
        let h: Inflow = Arc::new(move |phi, psi| {
            cc[0] + cc[1] * phi.sin() + cc[2] * (3.0 * phi).cos() * psi.sin() + cc[3] * (2.0 * psi).cos() * phi.cos()
                + cc[4] * (phi > cut) as i32 as f64
                + cc[5] * (5.0 * phi).sin()
        });
        let sol = op.solve(Arc::clone(&h), Source::Zero, &SolveOptions::default()).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in 0..=4000 {
            let phi = (FRAC_PI_2 * m as f64 / 4000.0).max(1e-12);
            for &psi in &op.grid.psi {
                let v = h(phi, psi);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        for v in &sol.values {
            worst = worst.max(lo - v).max(v - hi);
        }
    }
    outcome(worst <= 1e-6, format!("worst excursion {worst:.1e} over 20 data"))
}

fn energy_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = MilneParams::new(0.1, 1.0, 2.0);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let eta = rng.gen_range(0.0..p.length);
        let phi = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
        let psi = rng.gen_range(-PI..PI);
        let top = p.eta_plus(eta, phi, psi).map(|s| s.min(p.length)).unwrap_or(p.length);
        let eta2 = rng.gen_range(0.0..=top);
        let phi2 = p.characteristic_phi(eta, phi, psi, eta2).unwrap();
        let de = p.energy_e(eta2, phi2, psi).unwrap() - p.energy_e(eta, phi, psi).unwrap();
        worst = worst.max(de.abs());
    }
    outcome(worst < 1e-12, format!("max |dE| {worst:.1e} over 1e4 characteristics"))
}

fn ramp() -> Inflow {
    Arc::new(|phi, psi| phi / FRAC_PI_2 * (1.0 + 0.2 * psi.cos()))
}

fn milne_decay() -> Outcome {
    let params = MilneParams::new(0.1, 1.0, 1.0);
    let opts = SolveOptions::default();
    let a = milne_solve(params, &MilneGridSpec::sphere(200, 64, 8), ramp(), Source::Zero, &opts).unwrap();
    let b = milne_solve(params, &MilneGridSpec::sphere(400, 128, 8), ramp(), Source::Zero, &opts).unwrap();
    let fit = a.decay_fit();
    let k0 = fit.k0.unwrap_or(0.0);
    let rel = ((a.f_l - b.f_l) / b.f_l).abs();
    outcome(
        k0 > 0.2 && fit.r2 > 0.95 && rel < 0.01,
        format!("K0 {k0:.3}, R2 {:.4}, f_L drift {rel:.1e} under doubling", fit.r2),
    )
}

fn specular_flux() -> Outcome {
    let sol = milne_solve(
        MilneParams::new(0.1, 1.0, 1.0),
        &MilneGridSpec::sphere(200, 64, 8),
        ramp(),
        Source::Zero,
        &SolveOptions::default(),
    )
    .unwrap();
    let flux = sol.odd_flux_at_l().abs();
    outcome(flux < 10.0 * MILNE_TOL, format!("|<sin phi, f>(L)| {flux:.1e}"))
}

fn transport_exactness() -> Outcome {
    let t = Instant::now();
    let geometry = Geometry::disk(1.0).unwrap();
    let spec = TransportGridSpec {
        radial: RadialSpacing::Uniform { n: 64 },
        n_theta: 64,
        n_omega: 64,
        interpolation: Interpolation::Linear,
        ..Default::default()
    };
    let ctl = SolveControl::default();
    let c = KineticProblem { geometry, eps: 0.05, boundary: Arc::new(|_, _| 7.0), source: None };
    let fc = steady_solve(&c, &spec, &ctl).unwrap();
    let err = sup_dev(&fc.values, 7.0);
    let b = KineticProblem {
        geometry,
        eps: 0.05,
        boundary: Arc::new(|x: &Vec3, w: &Vec3| {
            let th = x.y.atan2(x.x);
            (0.5 + 0.5 * (3.0 * th).sin() * w.x).clamp(0.0, 1.0) * (x.x * w.y - x.y * w.x > -0.3) as i32 as f64
        }),
        source: None,
    };
    let fb = steady_solve(&b, &spec, &ctl).unwrap();
    let (lo, hi) = fb.min_max();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        err < 1e-8 && lo >= -1e-8 && hi <= 1.0 + 1e-8 && secs < 60.0,
        format!("|u-7| {err:.1e}, range [{lo:.3e}, {hi:.6}], {secs:.1} s"),
    )
}

fn fluid_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..=8i32 {
        let p = DirichletProblem {
            geometry: Geometry::disk(1.0).unwrap(),
            boundary: Arc::new(move |x: &Vec3| (k as f64 * x.y.atan2(x.x)).cos()),
        };
        let f = laplace_solve(&p, 64).unwrap();
        for i in 0..9 {
            for a in 0..13 {
                let r = 0.999 * i as f64 / 8.0;
                let th = TAU * a as f64 / 13.0 + 0.1;
                let x = Vec3::new(r * th.cos(), r * th.sin(), 0.0);
                worst = worst.max((f.value(&x) - r.powi(k) * (k as f64 * th).cos()).abs());
            }
        }
    }
    let heat = HeatProblem {
        geometry: Geometry::disk(1.0).unwrap(),
        boundary: Arc::new(|_, _| 0.0),
        initial: Arc::new(|x| bessel_j0(J0_FIRST_ZERO * x.norm())),
        diffusivity: 1.0 / 3.0,
    };
    let times: Vec<f64> = (0..6).map(|k| 0.2 * k as f64).collect();
    let snaps = heat_solve(&heat, &PolarMesh::new(1.0, 64, 8).unwrap(), 0.005, &times).unwrap();
    let t: Vec<f64> = snaps.iter().map(|s| s.t).collect();
    let y: Vec<f64> = snaps.iter().map(|s| s.field.values[0].ln()).collect();
    let (slope, _, _, _) = linear_fit(&t, &y);
    let want = J0_FIRST_ZERO * J0_FIRST_ZERO / 3.0;
    let rel = (-slope - want).abs() / want;
    outcome(worst < 1e-10 && rel < 0.02, format!("modal err {worst:.1e} (k<=8), decay rate off by {:.2}%", 100.0 * rel))
}

fn decomposition_certificate() -> Outcome {
    let op = Arc::new(MilneOperator::build(MilneParams::new(0.1, 1.0, 1.0), &MilneGridSpec::sphere(200, 64, 8)).unwrap());
    let g: Inflow = Arc::new(|phi, _| phi / FRAC_PI_2);
    let d = decompose_boundary_data(g, &op, &DecompositionOptions::default()).unwrap();
    let lambda = d.lambda.unwrap_or(f64::NAN);
    let ok = lambda > 0.0 && lambda < 1.0 && d.matching_residual < 1e-6 && d.grazing_derivative < 10.0 * MILNE_TOL;
    outcome(
        ok,
        format!(
            "lambda {lambda:.4}, matching residual {:.1e}, grazing derivative {:.1e}",
            d.matching_residual, d.grazing_derivative
        ),
    )
}

fn criterion9_config() -> StudyConfig {
    StudyConfig { geometry: Geometry::disk(2.0).unwrap(), eps: vec![0.1, 0.05, 0.025, 0.0125], ..Default::default() }
}

fn study_csv(cfg: &StudyConfig, workers: usize) -> (kinlab::asymptotics::StudyOutput, Vec<u8>) {
    let out = with_workers(workers, || convergence_study(cfg, None)).unwrap();
    let mut bytes = Vec::new();
    out.report.write_csv(&mut bytes).unwrap();
    (out, bytes)
}

fn diffusive_limit(out: &kinlab::asymptotics::StudyOutput, secs: f64) -> Outcome {
    let v = &out.report.variants[0];
    let errs: Vec<String> = out.report.rows.iter().map(|r| format!("{:.2e}", r.norms.interior_linf)).collect();
    let slope = v.slope.map(|s| s.slope).unwrap_or(f64::NAN);
    outcome(
        v.strictly_decreasing && slope >= 0.3 && !v.flagged && secs < 1800.0,
        format!("interior Linf [{}], slope {slope:.3}, {secs:.0} s", errs.join(", ")),
    )
}

fn geometric_beats_flat() -> Outcome {
    let cfg = StudyConfig {
        geometry: Geometry::disk(2.0).unwrap(),
        eps: vec![0.1, 0.05, 0.025, 0.0125],
        profile: BoundaryProfile::GrazingBump { base: 0.2, height: 0.8, width: 0.15, k: 0, mix: 0.0 },
        compare_flat: true,
        ..Default::default()
    };
    let out = convergence_study(&cfg, None).unwrap();
    let mut pairs = out.report.pairs.clone();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ok = pairs.len() >= 2 && pairs[..2].iter().all(|(_, geo, flat)| geo <= flat);
    let txt: Vec<String> = pairs[..2.min(pairs.len())]
        .iter()
        .map(|(e, geo, flat)| format!("eps {e}: {geo:.2e} vs {flat:.2e}"))
        .collect();
    outcome(ok, txt.join("; "))
}

fn unsteady_layers() -> Outcome {
    let rep = unsteady_study(&UnsteadyConfig::default()).unwrap();
    let ok = rep.rows.len() == 3
        && rep.rows.iter().all(|r| r.with_initial_layer.linf < r.without_initial_layer.linf)
        && rep.initial_identity < 1e-12;
    let txt: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("tau {}: {:.1e} < {:.1e}", r.tau, r.with_initial_layer.linf, r.without_initial_layer.linf))
        .collect();
    outcome(ok, format!("{}; identity {:.1e}", txt.join(", "), rep.initial_identity))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report("c1 milne constant exactness", milne_constant());
    report("c2 milne maximum principle", milne_maximum_principle());
    report("c3 energy invariance", energy_invariance());
    report("c4 exponential decay", milne_decay());
    report("c5 specular orthogonality", specular_flux());
    report("c6 transport exactness and boundedness", transport_exactness());
    report("c7 fluid exactness", fluid_exactness());
    report("c8 decomposition certificate", decomposition_certificate());

    let cfg = criterion9_config();
    let t = Instant::now();
    let (single, bytes1) = study_csv(&cfg, 1);
    let secs = t.elapsed().as_secs_f64();
    report("c9 diffusive-limit convergence", diffusive_limit(&single, secs));
    report("c10 geometric beats flat", geometric_beats_flat());
    report("c11 unsteady layers", unsteady_layers());
    let (_, bytes8) = study_csv(&cfg, 8);
    report(
        "c12 determinism",
        outcome(bytes1 == bytes8, format!("{} CSV bytes, 1 vs 8 workers identical: {}", bytes1.len(), bytes1 == bytes8)),
    );

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
