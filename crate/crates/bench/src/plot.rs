//! CSV extraction from run artifacts.

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use serde_json::Value;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotTarget {
    /// One row per sweep point of a stability artifact.
    StabilityCurve,
    /// One row per theory-table case of a memory artifact.
    NormMemory,
    /// One row per case of a compose artifact.
    Traffic,
}

impl PlotTarget {
    pub fn suite(self) -> &'static str {
        match self {
            PlotTarget::StabilityCurve => "stability",
            PlotTarget::NormMemory => "memory",
            PlotTarget::Traffic => "compose",
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            PlotTarget::StabilityCurve => &["dtype", "g", "stable_err", "naive_err", "fused_err"],
            PlotTarget::NormMemory => &["shape", "rank", "theory_ratio", "factored_transient_bytes", "dense_transient_bytes"],
            PlotTarget::Traffic => &[
                "id",
                "rows",
                "d_out",
                "dtype",
                "fused_bytes",
                "eager_bytes",
                "byte_ratio",
                "fused_passes",
                "eager_passes",
            ],
        }
    }

    fn selects(self, id: &str) -> bool {
        match self {
            PlotTarget::StabilityCurve => id.starts_with("sweep/") && !id.ends_with("/peak_ratio"),
            PlotTarget::NormMemory => id.starts_with("theory/"),
            PlotTarget::Traffic => true,
        }
    }
}

fn field<'a>(case: &'a Value, pointer: &str) -> Result<&'a Value> {
    let id = case.get("id").and_then(Value::as_str).unwrap_or("?");
    case.pointer(pointer)
        .filter(|v| !v.is_null())
        .ok_or_else(|| anyhow!("case `{id}` is missing field `{}`", pointer.trim_start_matches('/').replace('/', ".")))
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn row(target: PlotTarget, case: &Value) -> Result<Vec<String>> {
    let get = |p: &str| field(case, p).map(cell);
    Ok(match target {
        PlotTarget::StabilityCurve => vec![
            get("/outputs/dtype")?,
            get("/outputs/g")?,
            get("/outputs/stable_err")?,
            get("/outputs/naive_err")?,
            get("/outputs/fused_err")?,
        ],
        PlotTarget::NormMemory => vec![
            format!("{}x{}", get("/inputs/d_out")?, get("/inputs/d_in")?),
            get("/inputs/rank")?,
            get("/outputs/theory_ratio")?,
            get("/outputs/factored_transient_bytes")?,
            get("/outputs/dense_transient_bytes")?,
        ],
        PlotTarget::Traffic => vec![
            get("/id")?,
            get("/inputs/rows")?,
            get("/inputs/d_out")?,
            get("/inputs/dtype")?,
            get("/outputs/fused_traffic/bytes_total")?,
            get("/outputs/eager_traffic/bytes_total")?,
            get("/outputs/byte_ratio")?,
            get("/outputs/fused_traffic/pass_count")?,
            get("/outputs/eager_traffic/pass_count")?,
        ],
    })
}

/// Render the CSV for `target` from a parsed artifact.
pub fn emit_plot_data(artifact: &Value, target: PlotTarget) -> Result<String> {
    let suite = field(artifact, "/suite")?.as_str().unwrap_or_default();
    if suite != target.suite() {
        bail!("target {:?} needs a `{}` artifact, got `{suite}`", target, target.suite());
    }
    let cases = field(artifact, "/cases")?
        .as_array()
        .ok_or_else(|| anyhow!("field `cases` is not an array"))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(target.header())?;
    for case in cases {
        let id = field(case, "/id")?.as_str().unwrap_or_default();
        if target.selects(id) {
            w.write_record(row(target, case)?)?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn emit_plot_data_from_path(path: &Path, target: PlotTarget) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    emit_plot_data(&value, target)
}
