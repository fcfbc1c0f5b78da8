//! `fit`: run the staged inference on one hypothesis file or a directory
//! of them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use partfit::geometry::ShapeBasis;
use partfit::pipeline::{infer, FitOutput, InferConfig};
use partfit::solver::HypothesisSet;
use rayon::prelude::*;

use crate::manifest::RunManifest;
use crate::records::{load_config, points, read_json, write_json, FitRecord};

pub fn run(
    hypotheses: &Path,
    basis_path: &Path,
    out: &Path,
    config_path: Option<&PathBuf>,
    svg_path: Option<&PathBuf>,
    edges_path: Option<&PathBuf>,
) -> Result<String> {
    let basis: ShapeBasis = read_json(basis_path)?;
    let config: InferConfig = match config_path {
        Some(p) => load_config(p)?,
        None => InferConfig::default(),
    };
    let edges = crate::svg::load_or_default_edges(edges_path.map(|p| p.as_path()), basis.mean_shape())?;

    let mut manifest = RunManifest::new("fit", out)
        .input("hypotheses", hypotheses)
        .input("basis", basis_path)
        .config(config_path);
    if let Some(svg) = svg_path {
        manifest = manifest.extra("svg", svg);
    }
    if let Some(edges) = edges_path {
        manifest = manifest.extra("edges", edges);
    }

    let summary = if hypotheses.is_dir() {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let stems = hypothesis_stems(hypotheses)?;
        if stems.is_empty() {
            bail!("no *.hyps.json files in {}", hypotheses.display());
        }
        let records: Vec<(String, FitRecord)> = stems
            .par_iter()
            .map(|stem| -> Result<(String, FitRecord)> {
                let set = load_set(&hypotheses.join(format!("{stem}.hyps.json")))?;
                let record = fit_one(&set, &basis, &config)?;
                write_json(&out.join(format!("{stem}.result.json")), &record)?;
                if let Some(svg_dir) = svg_path {
                    fs::create_dir_all(svg_dir)?;
                    crate::svg::write(
                        &svg_dir.join(format!("{stem}.svg")),
                        &record.prediction_matrix(),
                        &record.pose.visibility,
                        &edges,
                    )?;
                }
                Ok((stem.clone(), record))
            })
            .collect::<Result<_>>()?;
        manifest.write_in_dir()?;
        let converged = records.iter().filter(|(_, r)| r.converged).count();
        format!(
            "fit: {} instances, {} converged -> {}",
            records.len(),
            converged,
            out.display()
        )
    } else {
        let set = load_set(hypotheses)?;
        let record = fit_one(&set, &basis, &config)?;
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        write_json(out, &record)?;
        if let Some(svg) = svg_path {
            crate::svg::write(svg, &record.prediction_matrix(), &record.pose.visibility, &edges)?;
        }
        manifest.write_beside_file()?;
        format!(
            "fit: converged={} iterations={} objective={:.6} -> {}",
            record.converged,
            record.iterations,
            record.objective,
            out.display()
        )
    };
    Ok(summary)
}

fn load_set(path: &Path) -> Result<HypothesisSet> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(HypothesisSet::from_json(&text)?)
}

pub fn fit_one(set: &HypothesisSet, basis: &ShapeBasis, config: &InferConfig) -> Result<FitRecord> {
    let output: FitOutput = infer(basis, set, config)?;
    Ok(FitRecord {
        predictions: points(&output.predictions),
        visible_ids: output.visible_ids,
        scales: output.scales,
        converged: output.last_solve.converged,
        iterations: output.last_solve.iterations,
        objective: output.last_solve.objective,
        stages: output.stages,
        pose: output.result,
    })
}

/// Instance stems sorted numerically so output ordering never depends on
/// directory iteration order.
pub fn hypothesis_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<(u64, String)> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".hyps.json") {
            stems.push((stem_order(stem), stem.to_string()));
        }
    }
    stems.sort();
    Ok(stems.into_iter().map(|(_, s)| s).collect())
}

pub fn stem_order(stem: &str) -> u64 {
    stem.chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect::<String>()
        .parse()
        .unwrap_or(u64::MAX)
}
