//! On-disk records shared between subcommands.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{Matrix2xX, Matrix3};
use partfit::geometry::PoseShapeResult;
use partfit::pipeline::StageRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Ground truth for one synthetic instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub instance: usize,
    pub azimuth: f64,
    pub elevation: f64,
    /// Row-major 3x3.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 2],
    pub coefficients: Vec<f64>,
    pub projections: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

impl TruthRecord {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn projection_matrix(&self) -> Matrix2xX<f64> {
        columns(&self.projections)
    }
}

/// Output of one fit, everything eval and downstream tooling consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub pose: PoseShapeResult,
    pub predictions: Vec<[f64; 2]>,
    pub visible_ids: Vec<usize>,
    pub scales: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub stages: Vec<StageRecord>,
}

impl FitRecord {
    pub fn prediction_matrix(&self) -> Matrix2xX<f64> {
        columns(&self.predictions)
    }
}

pub fn columns(points: &[[f64; 2]]) -> Matrix2xX<f64> {
    Matrix2xX::from_fn(points.len(), |r, c| points[c][r])
}

pub fn points(m: &Matrix2xX<f64>) -> Vec<[f64; 2]> {
    m.column_iter().map(|c| [c.x, c.y]).collect()
}

/// Loads a config file as JSON or TOML, decided by extension.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => serde_json::from_str(&text)
            .with_context(|| format!("parsing {} as JSON", path.display())),
        "toml" => toml::from_str(&text)
            .with_context(|| format!("parsing {} as TOML", path.display())),
        other => bail!(
            "config {} has unsupported extension {other:?} (expected .json or .toml)",
            path.display()
        ),
    }
}

/// Writes pretty JSON with a trailing newline; output is deterministic for
/// a given value.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
