//! `select-landmarks`: facility-location selection over per-landmark APs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::Matrix3xX;
use partfit::geometry::ShapeBasis;
use partfit::selection::{build_instance, solve_lp_relaxation, threshold_and_repair};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::records::{load_config, read_json, write_json};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub lambda: f64,
    pub tau: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        // Coverage-distance weight straight from the method's published
        // setting; tau splits the fractional opening variables in half.
        Self { lambda: 1.0, tau: 0.5 }
    }
}

#[derive(Serialize)]
struct SelectionFile {
    /// Original landmark ids that were selected.
    landmarks: Vec<usize>,
    lambda: f64,
    tau: f64,
    lp_objective: f64,
    duality_gap: f64,
    rounded_objective: f64,
    /// Serving selected landmark per candidate, original ids.
    assignment: Vec<usize>,
    fractional_y: Vec<f64>,
}

/// AP input: either a bare JSON array (one AP per basis landmark, null for
/// unknown) or anything carrying a train report (`report.ap_after` or a
/// top-level `ap_after` plus optional `landmarks` ids).
fn load_aps(path: &Path, p: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let value: serde_json::Value = read_json(path)?;
    let (ids, raw): (Option<Vec<usize>>, Vec<Option<f64>>) = if value.is_array() {
        (None, serde_json::from_value(value)?)
    } else {
        let report = value
            .get("report")
            .filter(|r| !r.is_null())
            .or_else(|| value.get("ap_after").map(|_| &value))
            .with_context(|| {
                format!("{} carries neither an AP array nor a train report", path.display())
            })?;
        let ids = report
            .get("landmarks")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()?;
        let aps = serde_json::from_value(
            report
                .get("ap_after")
                .with_context(|| format!("{} report lacks ap_after", path.display()))?
                .clone(),
        )?;
        (ids, aps)
    };
    let ids = match ids {
        Some(ids) if !ids.is_empty() => ids,
        _ => (0..raw.len()).collect(),
    };
    if ids.len() != raw.len() {
        bail!("{} lists {} landmark ids for {} APs", path.display(), ids.len(), raw.len());
    }
    if let Some(&bad) = ids.iter().find(|&&j| j >= p) {
        bail!("AP entry for landmark {bad} but the basis has only {p}");
    }
    let aps = raw
        .into_iter()
        .map(|ap| ap.unwrap_or_else(|| {
            log::warn!("missing AP treated as 0");
            0.0
        }))
        .collect();
    Ok((ids, aps))
}

pub fn run(
    ap_path: &Path,
    basis_path: &Path,
    out: &Path,
    config_path: Option<&PathBuf>,
    lambda_flag: Option<f64>,
    tau_flag: Option<f64>,
) -> Result<String> {
    let basis: ShapeBasis = read_json(basis_path)?;
    let mut cfg: SelectConfig = match config_path {
        Some(p) => load_config(p)?,
        None => SelectConfig::default(),
    };
    if let Some(l) = lambda_flag {
        cfg.lambda = l;
    }
    if let Some(t) = tau_flag {
        cfg.tau = t;
    }
    let (ids, aps) = load_aps(ap_path, basis.p())?;
    let shape: Matrix3xX<f64> = Matrix3xX::from_columns(
        &ids.iter().map(|&j| basis.mean_shape().column(j).into_owned()).collect::<Vec<_>>(),
    );
    let inst = build_instance(&aps, &[shape], cfg.lambda)?;
    let fractional = solve_lp_relaxation(&inst)?;
    let rounded = threshold_and_repair(&fractional, &inst, cfg.tau)?;

    let landmarks: Vec<usize> = rounded
        .selected
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(v, _)| ids[v])
        .collect();
    let file = SelectionFile {
        landmarks: landmarks.clone(),
        lambda: cfg.lambda,
        tau: cfg.tau,
        lp_objective: fractional.objective,
        duality_gap: fractional.duality_gap,
        rounded_objective: rounded.objective,
        assignment: rounded.assignment.iter().map(|&v| ids[v]).collect(),
        fractional_y: fractional.y.clone(),
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_json(out, &file)?;
    RunManifest::new("select-landmarks", out)
        .input("ap", ap_path)
        .input("basis", basis_path)
        .config(config_path)
        .extra("lambda", &cfg.lambda)
        .extra("tau", &cfg.tau)
        .write_beside_file()?;
    Ok(format!(
        "select-landmarks: {}/{} selected, lp={:.4} rounded={:.4} -> {}",
        landmarks.len(),
        ids.len(),
        fractional.objective,
        rounded.objective,
        out.display()
    ))
}
