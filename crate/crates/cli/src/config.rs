//! Optional JSON run configuration. Every field mirrors a command-line flag;
//! flags win on conflict. Unknown keys are rejected so a typo in a scenario
//! parameter fails loudly instead of silently running the default.

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use swgpc::estimators::Method;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: Option<String>,
    pub p0: Option<f64>,
    pub icc: Option<f64>,
    pub cac: Option<f64>,
    pub beta_t: Option<f64>,
    pub delta: Option<f64>,
    pub reps: Option<u32>,
    pub seed: Option<u64>,
    pub n_per_cell: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub out: Option<String>,
    pub threads: Option<usize>,
    pub persist_replicates: Option<bool>,
}

impl RunConfig {
    pub fn load(path: Option<&str>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p).with_context(|| format!("reading {p}"))?;
                serde_json::from_str(&raw).with_context(|| format!("parsing config {p}"))
            }
        }
    }

    /// The scenario-parameter fields, for rejecting them where they do not
    /// apply (e.g. under `ether`, whose scenario grid is fixed).
    pub fn scenario_overrides(&self) -> Vec<&'static str> {
        let mut set = Vec::new();
        if self.grid.is_some() {
            set.push("grid");
        }
        if self.p0.is_some() {
            set.push("p0");
        }
        if self.icc.is_some() {
            set.push("icc");
        }
        if self.cac.is_some() {
            set.push("cac");
        }
        if self.beta_t.is_some() {
            set.push("beta_t");
        }
        if self.delta.is_some() {
            set.push("delta");
        }
        if self.n_per_cell.is_some() {
            set.push("n_per_cell");
        }
        set
    }
}

/// Parses a comma-separated method list (case-insensitive names).
pub fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for name in names {
        let m: Method = name
            .parse()
            .map_err(|e| anyhow::anyhow!("method `{name}`: {e}"))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!("empty method list");
    }
    Ok(out)
}
