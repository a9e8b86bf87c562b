//! Subcommand drivers. Each writes its artifacts into the output directory and
//! returns a JSON summary for the manifest.

use crate::config::RunConfig;
use kinlab::asymptotics::{
    convergence_study, cutoff_slope, decompose_boundary_data, error_norms, unsteady_study, AsymptoticsError,
    DecompositionOptions, LayerStack, StudyConfig, UnsteadyConfig, Variant,
};
use kinlab::milne::{MilneError, MilneOperator, MilneParams, Source};
use kinlab::transport::{steady_solve, unsteady_solve, KineticProblem, TransportError, UnsteadyProblem};
use kinlab::Geometry;
use serde_json::{json, Value};
use std::f64::consts::FRAC_PI_2;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    NonConvergence(String),
    UnderResolved(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) | Failure::Io(_) => 1,
            Failure::NonConvergence(_) => 2,
            Failure::UnderResolved(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::NonConvergence(m) => write!(f, "numerical failure: {m}"),
            Failure::UnderResolved(m) => write!(f, "under-resolved reference: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<MilneError> for Failure {
    fn from(e: MilneError) -> Self {
        match e {
            MilneError::NonConvergence { .. } => Failure::NonConvergence(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<TransportError> for Failure {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::NonConvergence { .. } => Failure::NonConvergence(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<AsymptoticsError> for Failure {
    fn from(e: AsymptoticsError) -> Self {
        match e {
            AsymptoticsError::Milne(m) => m.into(),
            AsymptoticsError::Transport(t) => t.into(),
            AsymptoticsError::ConstructionFailure { .. } => Failure::NonConvergence(e.to_string()),
            AsymptoticsError::Cache(m) => Failure::Io(m),
            _ => Failure::Config(e.to_string()),
        }
    }
}

pub struct Outcome {
    pub outputs: Vec<String>,
    pub summary: Value,
    /// Set when outputs were written but the run must still fail.
    pub deferred: Option<Failure>,
}

fn create(dir: &Path, name: &str, outputs: &mut Vec<String>) -> Result<BufWriter<File>, Failure> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    outputs.push(name.to_string());
    Ok(BufWriter::new(f))
}

fn write_json(dir: &Path, name: &str, v: &Value, outputs: &mut Vec<String>) -> Result<(), Failure> {
    let mut w = create(dir, name, outputs)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| Failure::Io(e.to_string()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Failure::Io(e.to_string()))
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Io(e.to_string())
}

fn milne_params(cfg: &RunConfig, eps: f64) -> MilneParams {
    let (d1, d2) = match cfg.geometry {
        Geometry::Ball { radius } => (radius, radius),
        g => (g.radius(), f64::INFINITY),
    };
    let p = if cfg.flat {
        MilneParams::flat(eps)
    } else {
        MilneParams::new(eps, cfg.milne.r1.unwrap_or(d1), cfg.milne.r2.unwrap_or(d2))
    };
    p.with_length_exponent(cfg.milne.length_exponent)
}

fn validate_profile(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.profile.validate().map_err(|m| Failure::Config(format!("profile: {m}")))?;
    cfg.geometry.validated().map_err(|e| Failure::Config(format!("geometry: {e}")))?;
    Ok(())
}

pub fn run_milne(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    let eps = cfg.require_eps().map_err(Failure::Config)?;
    validate_profile(cfg)?;
    let op = Arc::new(MilneOperator::build(milne_params(cfg, eps), &cfg.milne.grid)?);
    let sol = op.solve(cfg.profile.inflow_at(cfg.iota), Source::Zero, &cfg.milne.solve)?;
    let mut outputs = Vec::new();
    sol.write_csv(create(out, "solution.csv", &mut outputs)?).map_err(csv_err)?;
    let summary = json!({
        "eps": eps,
        "length": op.params.length,
        "geometric": op.params.geometric,
        "solution": sol.summary(),
    });
    write_json(out, "summary.json", &summary, &mut outputs)?;
    Ok(Outcome { outputs, summary, deferred: None })
}

pub fn run_transport(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    let eps = cfg.require_eps().map_err(Failure::Config)?;
    validate_profile(cfg)?;
    let geometry = cfg.geometry;
    let mut outputs = Vec::new();
    let summary = if cfg.unsteady {
        let g = cfg.profile.boundary_data(geometry);
        let problem = UnsteadyProblem {
            geometry,
            eps,
            boundary: Arc::new(move |_t, x, w| g(x, w)),
            initial: cfg.initial.phase_function(geometry.radius()),
        };
        let traj = unsteady_solve(&problem, &cfg.transport.grid, &cfg.schedule, &cfg.taus)?;
        let mut snaps = Vec::new();
        for (i, s) in traj.snapshots.iter().enumerate() {
            let name = format!("field_{i:03}.csv");
            s.field.write_csv(create(out, &name, &mut outputs)?).map_err(csv_err)?;
            let (lo, hi) = s.field.min_max();
            snaps.push(json!({ "tau": s.tau, "t": s.t, "file": name, "min": lo, "max": hi }));
        }
        json!({ "eps": eps, "steps": traj.steps, "compatibility_violation": traj.compatibility_violation, "snapshots": snaps })
    } else {
        let problem = KineticProblem { geometry, eps, boundary: cfg.profile.boundary_data(geometry), source: None };
        let field = steady_solve(&problem, &cfg.transport.grid, &cfg.transport.control)?;
        field.write_csv(create(out, "field.csv", &mut outputs)?).map_err(csv_err)?;
        let (lo, hi) = field.min_max();
        json!({
            "eps": eps,
            "nodes": field.n_nodes(),
            "ordinates": field.n_ordinates(),
            "min": lo,
            "max": hi,
            "residual": field.residual,
        })
    };
    write_json(out, "summary.json", &summary, &mut outputs)?;
    Ok(Outcome { outputs, summary, deferred: None })
}

pub fn run_expand(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    let eps = cfg.require_eps().map_err(Failure::Config)?;
    validate_profile(cfg)?;
    let mut outputs = Vec::new();
    if cfg.unsteady {
        let ucfg = UnsteadyConfig {
            geometry: cfg.geometry,
            eps,
            profile: cfg.profile,
            initial: cfg.initial,
            taus: cfg.taus.clone(),
            reference: cfg.transport.grid,
            schedule: cfg.schedule,
            expansion: cfg.expansion,
            heat_n_r: cfg.heat_n_r,
            heat_n_theta: cfg.heat_n_theta,
        };
        let rep = unsteady_study(&ucfg)?;
        let mut w = csv::Writer::from_writer(create(out, "unsteady.csv", &mut outputs)?);
        w.write_record(["tau", "linf", "l2", "interior_linf", "linf_without_initial_layer"]).map_err(csv_err)?;
        for r in &rep.rows {
            w.write_record(&[
                r.tau.to_string(),
                r.with_initial_layer.linf.to_string(),
                r.with_initial_layer.l2.to_string(),
                r.with_initial_layer.interior_linf.to_string(),
                r.without_initial_layer.linf.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Failure::Io(e.to_string()))?;
        let summary = serde_json::to_value(&rep).map_err(|e| Failure::Io(e.to_string()))?;
        write_json(out, "summary.json", &summary, &mut outputs)?;
        return Ok(Outcome { outputs, summary, deferred: None });
    }
    let variant = if cfg.flat { Variant::Flat } else { Variant::Geometric };
    let stack = LayerStack::build(&cfg.geometry, eps, &cfg.profile, &cfg.expansion, variant, cfg.cache.as_deref())?;
    let problem = KineticProblem { geometry: cfg.geometry, eps, boundary: cfg.profile.boundary_data(cfg.geometry), source: None };
    let field = steady_solve(&problem, &cfg.reference.spec(eps), &cfg.transport.control)?;
    let approx = stack.composite_on_field(&field);
    let norms = error_norms(&field, &approx, cfg.expansion.interior_cut);
    let consistency = stack.boundary_consistency(&cfg.profile, 16, 16);

    let three = cfg.geometry.dim() == 3;
    let mut w = csv::Writer::from_writer(create(out, "composite.csv", &mut outputs)?);
    let header: &[&str] = if three {
        &["x", "y", "z", "wx", "wy", "wz", "reference", "composite"]
    } else {
        &["x", "y", "wx", "wy", "reference", "composite"]
    };
    w.write_record(header).map_err(csv_err)?;
    let no = field.n_ordinates();
    for n in 0..field.n_nodes() {
        let x = field.nodes[n];
        for k in 0..no {
            let v = field.ordinates[k];
            let mut rec: Vec<String> = if three {
                vec![x.x, x.y, x.z, v.x, v.y, v.z].iter().map(|c| c.to_string()).collect()
            } else {
                vec![x.x, x.y, v.x, v.y].iter().map(|c| c.to_string()).collect()
            };
            rec.push(field.values[n * no + k].to_string());
            rec.push(approx[n * no + k].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Failure::Io(e.to_string()))?;

    let nodes: Vec<Value> = stack
        .nodes
        .iter()
        .map(|n| {
            let d = n.decomposition.as_ref();
            json!({
                "iota": n.iota,
                "f_l": n.full.f_l,
                "regular_limit": n.regular_limit(),
                "singular_limit": n.singular_limit(),
                "lambda": d.and_then(|d| d.lambda),
                "matching_residual": d.map(|d| d.matching_residual),
                "grazing_derivative": d.map(|d| d.grazing_derivative),
                "first_order_limit": n.first.as_ref().map(|f| f.f_l),
            })
        })
        .collect();
    let summary = json!({
        "eps": eps,
        "variant": variant.name(),
        "order": cfg.expansion.order,
        "boundary_consistency": consistency,
        "norms": norms,
        "reference_residual": field.residual,
        "grid": cfg.reference.describe(&field),
        "from_cache": stack.from_cache,
        "nodes": nodes,
    });
    write_json(out, "summary.json", &summary, &mut outputs)?;
    Ok(Outcome { outputs, summary, deferred: None })
}

pub fn run_decompose(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    let eps = cfg.require_eps().map_err(Failure::Config)?;
    validate_profile(cfg)?;
    if cfg.flat {
        return Err(Failure::Config("decompose needs the geometric layer; unset `flat`".into()));
    }
    let op = Arc::new(MilneOperator::build(milne_params(cfg, eps), &cfg.milne.grid)?);
    let opts = DecompositionOptions { alpha: cfg.expansion.alpha, milne: cfg.milne.solve };
    let g = cfg.profile.inflow_at(cfg.iota);
    let d = decompose_boundary_data(Arc::clone(&g), &op, &opts)?;
    let mut outputs = Vec::new();
    let mut w = csv::Writer::from_writer(create(out, "decomposition.csv", &mut outputs)?);
    w.write_record(["phi", "psi", "g", "regular", "singular"]).map_err(csv_err)?;
    let mut psis = op.grid.psi.clone();
    psis.dedup();
    let n = 400;
    for &psi in &psis {
        for j in 0..n {
            let phi = FRAC_PI_2 * (j as f64 + 0.5) / n as f64;
            w.write_record(&[phi, psi, g(phi, psi), d.regular(phi, psi), d.singular(phi, psi)].map(|v| v.to_string()))
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Failure::Io(e.to_string()))?;
    let slope = if d.lambda.is_some() {
        let (lo, span) = (d.lo, d.hi - d.lo);
        let gc = Arc::clone(&g);
        let gn: kinlab::milne::Inflow = Arc::new(move |p, s| (gc(p, s) - lo) / span);
        Some(cutoff_slope(&gn, eps, cfg.expansion.alpha, &psis)?)
    } else {
        None
    };
    let summary = json!({
        "eps": eps,
        "alpha": d.alpha,
        "cutoff_width": d.cutoff.width,
        "lambda": d.lambda,
        "matching_residual": d.matching_residual,
        "grazing_derivative": d.grazing_derivative,
        "grazing_derivative_fd": d.grazing_derivative_fd,
        "cutoff_slope_scaled": slope,
        "range": [d.lo, d.hi],
        "milne_tol": cfg.milne.solve.tol,
    });
    write_json(out, "summary.json", &summary, &mut outputs)?;
    Ok(Outcome { outputs, summary, deferred: None })
}

pub fn run_converge(cfg: &RunConfig, out: &Path) -> Result<Outcome, Failure> {
    if cfg.eps_list.len() < 3 {
        return Err(Failure::Config(format!(
            "field `eps_list`: need at least 3 epsilon values, got {}",
            cfg.eps_list.len()
        )));
    }
    validate_profile(cfg)?;
    let study = StudyConfig {
        geometry: cfg.geometry,
        eps: cfg.eps_list.clone(),
        profile: cfg.profile,
        expansion: cfg.expansion,
        reference: cfg.reference,
        compare_flat: cfg.compare_flat,
        self_check: cfg.self_check,
        resolution_ratio: cfg.resolution_ratio,
        floor: cfg.floor,
    };
    let res = convergence_study(&study, cfg.cache.as_deref())?;
    let mut outputs = Vec::new();
    res.report.write_csv(create(out, "report.csv", &mut outputs)?).map_err(csv_err)?;
    let variants: Vec<Value> = res
        .report
        .variants
        .iter()
        .map(|v| {
            json!({
                "variant": v.variant,
                "slope": v.slope.map(|s| s.slope),
                "slope_stderr": v.slope.map(|s| s.stderr),
                "slope_band": v.slope.map(|s| s.band),
                "slope_r2": v.slope.map(|s| s.r2),
                "slope_linf": v.slope_linf.map(|s| s.slope),
                "strictly_decreasing": v.strictly_decreasing,
                "flagged": v.flagged,
            })
        })
        .collect();
    let first = res.report.variants.first();
    let summary = json!({
        "slope": first.and_then(|v| v.slope.map(|s| s.slope)),
        "slope_stderr": first.and_then(|v| v.slope.map(|s| s.stderr)),
        "pairs": res.report.pairs,
        "variants": variants,
        "diagnostics": res.diagnostics,
    });
    write_json(out, "summary.json", &summary, &mut outputs)?;
    let mut flagged: Vec<f64> = res.report.rows.iter().filter(|r| r.under_resolved).map(|r| r.eps).collect();
    flagged.dedup();
    let deferred = if flagged.is_empty() {
        None
    } else {
        Some(Failure::UnderResolved(format!("self-convergence check failed at eps = {flagged:?}")))
    };
    Ok(Outcome { outputs, summary, deferred })
}
