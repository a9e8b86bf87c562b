//! Error tables, slope fits and run manifests.

use crate::quadrature::linear_fit;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub linf: f64,
    pub l2: f64,
    /// L∞ over nodes at depth ≥ the interior cut.
    pub interior_linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub variant: String,
    pub eps: f64,
    pub grid: String,
    #[serde(flatten)]
    pub norms: ErrorNorms,
    /// sup difference between the reference and its coarsened twin.
    pub self_convergence: f64,
    pub under_resolved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    /// slope ± 2 stderr
    pub band: (f64, f64),
    pub r2: f64,
}

/// Least-squares slope of ln(error) against ln(ε); `None` with fewer than
/// three usable rows or non-positive errors.
pub fn fit_slope(eps: &[f64], err: &[f64]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = eps.iter().zip(err).filter(|(e, v)| **e > 0.0 && **v > 0.0 && v.is_finite()).map(|(e, v)| (e.ln(), v.ln())).collect();
    if pts.len() < 3 || pts.len() != eps.len() {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let (slope, _, stderr, r2) = linear_fit(&x, &y);
    Some(SlopeFit { slope, stderr, band: (slope - 2.0 * stderr, slope + 2.0 * stderr), r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    /// Fit of the interior L∞ error; withheld (and `flagged` set) when any row
    /// is under-resolved or the errors sit at the solver floor.
    pub slope: Option<SlopeFit>,
    pub slope_linf: Option<SlopeFit>,
    pub strictly_decreasing: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ErrorRow>,
    pub variants: Vec<VariantSummary>,
    /// (ε, geometric L∞, flat L∞) when both variants ran.
    pub pairs: Vec<(f64, f64, f64)>,
}

impl ConvergenceReport {
    pub fn from_rows(rows: Vec<ErrorRow>, floor: f64) -> Self {
        let mut names: Vec<String> = Vec::new();
        for r in &rows {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        let variants = names
            .iter()
            .map(|name| {
                let sel: Vec<&ErrorRow> = rows.iter().filter(|r| &r.variant == name).collect();
                let eps: Vec<f64> = sel.iter().map(|r| r.eps).collect();
                let inner: Vec<f64> = sel.iter().map(|r| r.norms.interior_linf).collect();
                let linf: Vec<f64> = sel.iter().map(|r| r.norms.linf).collect();
                let flagged = sel.iter().any(|r| r.under_resolved);
                let at_floor = inner.iter().all(|v| *v <= floor);
                let mut order: Vec<usize> = (0..sel.len()).collect();
                order.sort_by(|a, b| eps[*b].partial_cmp(&eps[*a]).unwrap());
                let strictly_decreasing = order.windows(2).all(|w| inner[w[1]] < inner[w[0]]);
                let usable = !flagged && !at_floor;
                VariantSummary {
                    variant: name.clone(),
                    slope: if usable { fit_slope(&eps, &inner) } else { None },
                    slope_linf: if usable { fit_slope(&eps, &linf) } else { None },
                    strictly_decreasing,
                    flagged: !usable,
                }
            })
            .collect();
        let mut pairs = Vec::new();
        for g in rows.iter().filter(|r| r.variant == "geometric") {
            if let Some(f) = rows.iter().find(|r| r.variant == "flat" && r.eps == g.eps) {
                pairs.push((g.eps, g.norms.linf, f.norms.linf));
            }
        }
        ConvergenceReport { rows, variants, pairs }
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "eps", "grid", "linf", "l2", "interior_linf", "self_convergence", "under_resolved"])?;
        for r in &self.rows {
            w.write_record(&[
                r.variant.clone(),
                r.eps.to_string(),
                r.grid.clone(),
                r.norms.linf.to_string(),
                r.norms.l2.to_string(),
                r.norms.interior_linf.to_string(),
                r.self_convergence.to_string(),
                r.under_resolved.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Written next to every set of artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub workers: usize,
    pub seed: u64,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}
