//! Run configuration: TOML file, then `KINLAB_*` environment overrides, then
//! command-line flags.

use kinlab::asymptotics::{ExpansionConfig, ReferenceGrid};
use kinlab::milne::{MilneGridSpec, SolveOptions};
use kinlab::profiles::{BoundaryProfile, InitialProfile};
use kinlab::transport::{SolveControl, TimeSchedule, TransportGridSpec};
use kinlab::Geometry;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const ENV_PREFIX: &str = "KINLAB_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilneSection {
    pub grid: MilneGridSpec,
    pub solve: SolveOptions,
    /// L = ε^{-length_exponent}
    pub length_exponent: f64,
    /// Curvature radii; taken from the geometry when absent.
    pub r1: Option<f64>,
    pub r2: Option<f64>,
}

impl Default for MilneSection {
    fn default() -> Self {
        MilneSection {
            grid: MilneGridSpec::default(),
            solve: SolveOptions::default(),
            length_exponent: 0.5,
            r1: None,
            r2: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub grid: TransportGridSpec,
    pub control: SolveControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: Geometry,
    /// Single ε for milne, transport, expand and decompose.
    pub eps: Option<f64>,
    /// ε values of a convergence study.
    pub eps_list: Vec<f64>,
    /// In-flow datum g.
    pub profile: BoundaryProfile,
    /// Initial datum h (unsteady runs).
    pub initial: InitialProfile,
    /// Boundary chart angle used by milne and decompose.
    pub iota: f64,
    /// Classical layers without the curvature force.
    pub flat: bool,
    pub unsteady: bool,
    pub milne: MilneSection,
    pub transport: TransportSection,
    /// Layer construction, including order and α.
    pub expansion: ExpansionConfig,
    pub reference: ReferenceGrid,
    pub compare_flat: bool,
    pub self_check: bool,
    pub resolution_ratio: f64,
    pub floor: f64,
    /// Fast times τ = t/ε² of unsteady snapshots.
    pub taus: Vec<f64>,
    pub schedule: TimeSchedule,
    pub heat_n_r: usize,
    pub heat_n_theta: usize,
    /// 0 lets the thread pool decide.
    pub workers: usize,
    /// Recorded in the manifest; every stage is deterministic.
    pub seed: u64,
    /// Layer-stack cache directory.
    pub cache: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: Geometry::Disk { radius: 2.0 },
            eps: None,
            eps_list: vec![0.1, 0.05, 0.025, 0.0125],
            profile: BoundaryProfile::default(),
            initial: InitialProfile::default(),
            iota: 0.0,
            flat: false,
            unsteady: false,
            milne: MilneSection::default(),
            transport: TransportSection::default(),
            expansion: ExpansionConfig::default(),
            reference: ReferenceGrid::default(),
            compare_flat: false,
            self_check: true,
            resolution_ratio: 0.25,
            floor: 1e-7,
            taus: vec![0.0, 1.0, 5.0],
            schedule: TimeSchedule { dtau: 0.01, coarsen_after: 1.0, growth: 1.2, max_dtau: 0.1 },
            heat_n_r: 48,
            heat_n_theta: 32,
            workers: 0,
            seed: 0,
            cache: None,
            out: PathBuf::from("kinlab-out"),
        }
    }
}

impl RunConfig {
    pub fn require_eps(&self) -> Result<f64, String> {
        match self.eps {
            None => Err("missing field `eps`: epsilon is required for this command".into()),
            Some(e) if e > 0.0 && e.is_finite() => Ok(e),
            Some(e) => Err(format!("field `eps`: epsilon must be positive, got {e}")),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Apply `KINLAB_A__B=value` as `a.b = value`.
pub fn apply_env<I: IntoIterator<Item = (String, String)>>(table: &mut toml::Table, vars: I) -> Result<(), String> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(format!("malformed override {key}"));
        }
        let mut t = &mut *table;
        for p in &path[..path.len() - 1] {
            let entry = t.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            t = entry.as_table_mut().ok_or_else(|| format!("{key}: `{p}` is not a table"))?;
        }
        t.insert(path[path.len() - 1].clone(), parse_scalar(&raw));
    }
    Ok(())
}

pub fn load(text: Option<&str>, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, String> {
    let mut table: toml::Table = match text {
        Some(t) => t.parse().map_err(|e: toml::de::Error| format!("config: {}", e.message()))?,
        None => toml::Table::new(),
    };
    apply_env(&mut table, env)?;
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| format!("config: {}", e.message()))
}
