//! File formats and atomic output. All writes go through a temp file in the
//! target directory followed by a rename, so readers never observe a partial
//! file and a failed run leaves previous outputs intact.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use swgpc::trial::{
    Direction, EndpointHierarchy, EndpointKind, EndpointSpec, IndividualRecord, TrialDesign,
};
use swgpc::Dataset;

/// Writes `contents` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| anyhow!("output path {} has no file name", path.display()))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

const FIXED_COLUMNS: [&str; 5] = ["cluster", "period", "sequence", "time", "treatment"];

/// Renders a dataset as CSV: `cluster,period,sequence,time,treatment` plus
/// one column per endpoint, named after the hierarchy.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::from("cluster,period,sequence,time,treatment");
    for (name, _) in ds.hierarchy().iter() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in ds.records() {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.cluster, r.period, r.sequence, r.time, r.treatment
        ));
        for y in &r.outcomes {
            out.push_str(&format!(",{y}"));
        }
        out.push('\n');
    }
    out
}

/// Parses a dataset CSV. The endpoint columns after `treatment` must match
/// the hierarchy names in order. Errors carry 1-based file line numbers.
pub fn records_from_csv(
    raw: &str,
    hierarchy: &EndpointHierarchy,
) -> Result<Vec<IndividualRecord>> {
    let mut lines = raw.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| anyhow!("empty dataset file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < FIXED_COLUMNS.len() || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        bail!(
            "line 1: header must start with `{}`, got `{header}`",
            FIXED_COLUMNS.join(",")
        );
    }
    let names: Vec<&str> = cols[FIXED_COLUMNS.len()..].to_vec();
    let expected: Vec<&str> = hierarchy.iter().map(|(n, _)| n.as_str()).collect();
    if names != expected {
        bail!(
            "line 1: endpoint columns [{}] do not match the hierarchy [{}]",
            names.join(", "),
            expected.join(", ")
        );
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            bail!("line {line_no}: {} fields, header has {}", fields.len(), cols.len());
        }
        let err = |col: &str, value: &str| anyhow!("line {line_no}: bad {col} value `{value}`");
        let parse_usize =
            |i: usize| fields[i].parse::<usize>().map_err(|_| err(cols[i], fields[i]));
        let parse_f64 = |i: usize| fields[i].parse::<f64>().map_err(|_| err(cols[i], fields[i]));
        records.push(IndividualRecord {
            cluster: parse_usize(0)?,
            period: parse_usize(1)?,
            sequence: parse_usize(2)?,
            time: parse_f64(3)?,
            treatment: fields[4].parse::<u8>().map_err(|_| err(cols[4], fields[4]))?,
            outcomes: (FIXED_COLUMNS.len()..cols.len())
                .map(parse_f64)
                .collect::<Result<Vec<f64>>>()?,
        });
    }
    if records.is_empty() {
        bail!("dataset has a header but no records");
    }
    Ok(records)
}

/// Endpoint hierarchy sidecar: explicit fields, unknown keys rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HierarchyFile {
    endpoints: Vec<EndpointEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndpointEntry {
    name: String,
    kind: String,
    /// Required for continuous endpoints, rejected for binary ones.
    tie_threshold: Option<f64>,
    direction: String,
}

/// Parses the hierarchy sidecar JSON.
pub fn hierarchy_from_json(raw: &str) -> Result<EndpointHierarchy> {
    let file: HierarchyFile = serde_json::from_str(raw).context("parsing hierarchy JSON")?;
    let mut endpoints = Vec::with_capacity(file.endpoints.len());
    for e in file.endpoints {
        let kind = match (e.kind.as_str(), e.tie_threshold) {
            ("binary", None) => EndpointKind::Binary,
            ("binary", Some(_)) => {
                bail!("endpoint {:?}: tie_threshold is only valid for continuous kind", e.name)
            }
            ("continuous", Some(tie_threshold)) => EndpointKind::Continuous { tie_threshold },
            ("continuous", None) => {
                bail!("endpoint {:?}: continuous kind requires tie_threshold", e.name)
            }
            (other, _) => bail!("endpoint {:?}: unknown kind `{other}`", e.name),
        };
        let direction = match e.direction.as_str() {
            "higher_is_favorable" => Direction::HigherIsFavorable,
            "lower_is_favorable" => Direction::LowerIsFavorable,
            other => bail!("endpoint {:?}: unknown direction `{other}`", e.name),
        };
        endpoints.push((e.name, EndpointSpec { kind, direction }));
    }
    EndpointHierarchy::new(endpoints).map_err(|e| anyhow!("invalid hierarchy: {e}"))
}

/// Design sidecar: the three structural vectors of a stepped-wedge design.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignFile {
    sequence_of_cluster: Vec<usize>,
    switch_period: Vec<usize>,
    period_bounds: Vec<(f64, f64)>,
}

/// Parses and validates a design sidecar JSON.
pub fn design_from_json(raw: &str) -> Result<TrialDesign> {
    let file: DesignFile = serde_json::from_str(raw).context("parsing design JSON")?;
    TrialDesign::new(file.sequence_of_cluster, file.switch_period, file.period_bounds)
        .map_err(|e| anyhow!("invalid design: {e}"))
}

/// Infers a design from records: sequences as labelled in the data, each
/// switching at its earliest treated period, unit period bounds. Dataset
/// validation afterwards reports any record inconsistent with this design.
pub fn infer_design(records: &[IndividualRecord]) -> Result<TrialDesign> {
    let n_periods = records.iter().map(|r| r.period).max().unwrap_or(0).max(2);
    let n_sequences = records
        .iter()
        .map(|r| r.sequence)
        .max()
        .ok_or_else(|| anyhow!("no records to infer a design from"))?;
    let n_clusters = records.iter().map(|r| r.cluster).max().unwrap_or(0);

    let mut sequence_of_cluster = vec![0usize; n_clusters];
    let mut switch_period = vec![usize::MAX; n_sequences];
    for r in records {
        if r.cluster < 1 || r.sequence < 1 || r.sequence > n_sequences {
            bail!("record with cluster {} sequence {} cannot seed a design", r.cluster, r.sequence);
        }
        let slot = &mut sequence_of_cluster[r.cluster - 1];
        if *slot == 0 {
            *slot = r.sequence;
        } else if *slot != r.sequence {
            bail!("cluster {} appears in sequences {} and {}", r.cluster, slot, r.sequence);
        }
        if r.treatment == 1 {
            let s = &mut switch_period[r.sequence - 1];
            *s = (*s).min(r.period);
        }
    }
    for (k, &s) in sequence_of_cluster.iter().enumerate() {
        if s == 0 {
            bail!("cluster {} has no records; renumber clusters contiguously", k + 1);
        }
    }
    for (s, &p) in switch_period.iter().enumerate() {
        if p == usize::MAX {
            bail!(
                "sequence {} has no treated records; supply an explicit design file",
                s + 1
            );
        }
    }
    let period_bounds = (0..n_periods).map(|j| (j as f64, (j + 1) as f64)).collect();
    TrialDesign::new(sequence_of_cluster, switch_period, period_bounds)
        .map_err(|e| anyhow!("inferred design is invalid: {e}"))
}
