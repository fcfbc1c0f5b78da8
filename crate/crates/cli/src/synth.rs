//! `synth`: materialize a synthetic dataset from a spec file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use partfit::bench::{family_and_basis, generate_instance, SyntheticSpec};
use rayon::prelude::*;

use crate::manifest::RunManifest;
use crate::records::{load_config, points, write_json, TruthRecord};

pub fn run(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<String> {
    let mut spec: SyntheticSpec = load_config(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (_family, basis, degenerate) = family_and_basis(&spec)?;
    if degenerate {
        log::warn!(
            "shape family only supports {} basis directions (asked for {})",
            basis.k(),
            spec.basis_size
        );
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("basis.json"), &basis)?;
    write_json(&out.join("spec.json"), &spec)?;

    let written: Vec<PathBuf> = (0..spec.instances)
        .into_par_iter()
        .map(|i| -> Result<PathBuf> {
            let inst = generate_instance(&basis, &spec, i as u64)?;
            let stem = instance_stem(i);
            let hyps_path = out.join(format!("{stem}.hyps.json"));
            fs::write(&hyps_path, inst.hypotheses.to_json() + "\n")
                .with_context(|| format!("writing {}", hyps_path.display()))?;
            let rot = |r: usize| {
                [inst.rotation[(r, 0)], inst.rotation[(r, 1)], inst.rotation[(r, 2)]]
            };
            let truth = TruthRecord {
                instance: i,
                azimuth: inst.azimuth,
                elevation: inst.elevation,
                rotation: [rot(0), rot(1), rot(2)],
                translation: [inst.translation.x, inst.translation.y],
                coefficients: inst.coefficients.clone(),
                projections: points(&inst.projections),
                visibility: inst.visibility.clone(),
            };
            write_json(&out.join(format!("{stem}.truth.json")), &truth)?;
            Ok(hyps_path)
        })
        .collect::<Result<_>>()?;

    RunManifest::new("synth", out)
        .config(Some(&spec_path.to_path_buf()))
        .seed(seed)
        .write_in_dir()?;
    Ok(format!(
        "synth: {} instances, {} landmarks, k={} -> {}",
        written.len(),
        spec.landmarks,
        basis.k(),
        out.display()
    ))
}

pub fn instance_stem(i: usize) -> String {
    format!("instance_{i:04}")
}
