//! `eval`: score fit results against ground truth, emitting per-instance
//! CSV metrics and a summary. A truth file may stand in for a missing
//! result, which makes evaluating a directory against itself yield zeros.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::Matrix3;
use partfit::bench::{mean_apd, viewpoint_metrics};
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::records::{read_json, write_json, FitRecord, TruthRecord};

struct Row {
    instance: String,
    order: u64,
    apd: f64,
    apd_visible: f64,
    azimuth_err: f64,
    converged: bool,
    truth_rot: Matrix3<f64>,
    est_rot: Matrix3<f64>,
}

#[derive(Serialize)]
struct Summary {
    instances: usize,
    converged: usize,
    mean_apd: f64,
    mean_apd_visible: f64,
    mean_azimuth_error: f64,
    /// Coarse viewpoint accuracy keyed by bin width in degrees.
    accuracy: BTreeMap<String, f64>,
}

pub fn run(results: &Path, truth: &Path, out: &Path, bins: &[f64]) -> Result<String> {
    let stems = truth_stems(truth)?;
    if stems.is_empty() {
        bail!("no *.truth.json files in {}", truth.display());
    }
    let rows: Vec<Row> = stems
        .par_iter()
        .map(|stem| -> Result<Row> {
            let t: TruthRecord = read_json(&truth.join(format!("{stem}.truth.json")))?;
            let result_path = results.join(format!("{stem}.result.json"));
            let (pred, est_rot, converged) = if result_path.exists() {
                let r: FitRecord = read_json(&result_path)?;
                (r.prediction_matrix(), r.pose.rotation, r.converged)
            } else {
                // Fall back to the truth standing in for a result.
                let stand_in = results.join(format!("{stem}.truth.json"));
                let r: TruthRecord = read_json(&stand_in).with_context(|| {
                    format!(
                        "{} has neither {stem}.result.json nor {stem}.truth.json",
                        results.display()
                    )
                })?;
                (r.projection_matrix(), r.rotation_matrix(), true)
            };
            let truth_proj = t.projection_matrix();
            let truth_rot = t.rotation_matrix();
            Ok(Row {
                instance: stem.clone(),
                order: crate::fit::stem_order(stem),
                apd: mean_apd(&pred, &truth_proj, None)?,
                apd_visible: mean_apd(&pred, &truth_proj, Some(&t.visibility))?,
                azimuth_err: partfit::bench::azimuth_error_deg(&truth_rot, &est_rot),
                converged,
                truth_rot,
                est_rot,
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = rows;
    rows.sort_by(|a, b| a.order.cmp(&b.order).then_with(|| a.instance.cmp(&b.instance)));

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join("metrics.csv"), &rows, |r| r.apd)?;
    write_csv(&out.join("metrics_visible.csv"), &rows, |r| r.apd_visible)?;

    let truths: Vec<Matrix3<f64>> = rows.iter().map(|r| r.truth_rot).collect();
    let ests: Vec<Matrix3<f64>> = rows.iter().map(|r| r.est_rot).collect();
    let mut accuracy = BTreeMap::new();
    for &bin in bins {
        let (acc, _) = viewpoint_metrics(&truths, &ests, bin)?;
        accuracy.insert(format!("{bin}"), acc);
    }
    let n = rows.len() as f64;
    let summary = Summary {
        instances: rows.len(),
        converged: rows.iter().filter(|r| r.converged).count(),
        mean_apd: rows.iter().map(|r| r.apd).sum::<f64>() / n,
        mean_apd_visible: rows.iter().map(|r| r.apd_visible).sum::<f64>() / n,
        mean_azimuth_error: rows.iter().map(|r| r.azimuth_err).sum::<f64>() / n,
        accuracy,
    };
    write_json(&out.join("summary.json"), &summary)?;

    RunManifest::new("eval", out)
        .input("results", results)
        .input("truth", truth)
        .extra("bins", &bins)
        .write_in_dir()?;

    let mut line = format!(
        "eval: {} instances meanAPD={:.3} meanAPD_vis={:.3} azimuth_err={:.3}",
        summary.instances, summary.mean_apd, summary.mean_apd_visible, summary.mean_azimuth_error
    );
    for (bin, acc) in &summary.accuracy {
        write!(line, " acc[{bin}]={acc:.3}")?;
    }
    write!(line, " -> {}", out.display())?;
    Ok(line)
}

fn write_csv(path: &Path, rows: &[Row], apd: impl Fn(&Row) -> f64) -> Result<()> {
    let mut text = String::from("instance,meanAPD,azimuth_err,converged\n");
    for r in rows {
        let id = if r.order != u64::MAX {
            r.order.to_string()
        } else {
            r.instance.clone()
        };
        writeln!(text, "{id},{},{},{}", apd(r), r.azimuth_err, r.converged)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn truth_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".truth.json") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}
