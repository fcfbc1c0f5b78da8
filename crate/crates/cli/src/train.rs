//! `train-parts`: train part detectors on an annotated corpus.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use partfit::parts::{train_parts, PartSet, PartTrainConfig, TrainingCorpus};

use crate::manifest::RunManifest;
use crate::records::load_config;

pub fn run(
    corpus_dir: &Path,
    out: &Path,
    config_path: Option<&PathBuf>,
    seed: Option<u64>,
) -> Result<String> {
    let corpus = TrainingCorpus::load(corpus_dir)?;
    let mut cfg: PartTrainConfig = match config_path {
        Some(p) => load_config(p)?,
        None => PartTrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let trained = train_parts(&corpus, &cfg)?;
    let report = trained.report.clone();
    let set = PartSet::from_trained(trained);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    set.save(out)?;
    write_report(&out.with_extension("report.csv"), &report)?;
    RunManifest::new("train-parts", out)
        .input("corpus", corpus_dir)
        .config(config_path)
        .seed(seed)
        .write_beside_file()?;

    let mean = |aps: &[Option<f64>]| {
        let known: Vec<f64> = aps.iter().flatten().copied().collect();
        if known.is_empty() {
            f64::NAN
        } else {
            known.iter().sum::<f64>() / known.len() as f64
        }
    };
    Ok(format!(
        "train-parts: {} landmarks, mean AP {:.3} -> {:.3} -> {}",
        report.landmarks.len(),
        mean(&report.ap_before),
        mean(&report.ap_after),
        out.display()
    ))
}

fn write_report(path: &Path, report: &partfit::parts::TrainReport) -> Result<()> {
    let mut text = String::from("landmark,ap_before,ap_after,components\n");
    for (i, &j) in report.landmarks.iter().enumerate() {
        let fmt = |v: &Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            text,
            "{j},{},{},{}",
            fmt(&report.ap_before[i]),
            fmt(&report.ap_after[i]),
            report.components_used[i]
        )?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
