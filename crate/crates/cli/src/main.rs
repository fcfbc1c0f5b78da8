mod eval;
mod fit;
mod manifest;
mod records;
mod select;
mod svg;
mod synth;
mod train;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use manifest::RunManifest;

/// Part-based 2D localization, 3D pose and shape fitting.
///
/// Diagnostics go to stderr (level via the PARTFIT_LOG env var); stdout
/// carries one summary line per run.
#[derive(Parser)]
#[command(name = "partfit", version, arg_required_else_help = true)]
struct Cli {
    /// Worker threads for per-instance commands (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file into a directory.
    Synth {
        /// Spec file (.json or .toml).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train part detectors on an annotated corpus directory.
    TrainParts {
        /// Corpus directory with annotations.json and images.
        #[arg(long)]
        corpus: PathBuf,
        /// Part-set output file.
        #[arg(long)]
        out: PathBuf,
        /// Training config (.json or .toml).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pick a landmark subset by facility location over per-landmark APs.
    SelectLandmarks {
        /// AP file: JSON array or a part-set/train report.
        #[arg(long)]
        ap: PathBuf,
        /// Shape basis file.
        #[arg(long)]
        basis: PathBuf,
        /// Selection output file.
        #[arg(long)]
        out: PathBuf,
        /// Selection config (.json or .toml).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weight on the landmark-coverage distance term (overrides config).
        #[arg(long)]
        lambda: Option<f64>,
        /// Rounding threshold on fractional openings (overrides config).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Fit pose and shape to a hypothesis file, or to every *.hyps.json in
    /// a directory.
    Fit {
        /// Hypothesis file or directory.
        #[arg(long)]
        hypotheses: PathBuf,
        /// Shape basis file.
        #[arg(long)]
        basis: PathBuf,
        /// Result file (or directory in batch mode).
        #[arg(long)]
        out: PathBuf,
        /// Inference config (.json or .toml).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Wireframe SVG output (file, or directory in batch mode).
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Edge list JSON for the SVG; nearest-neighbor sketch otherwise.
        #[arg(long)]
        edges: Option<PathBuf>,
    },
    /// Score fit results against ground truth into metric CSVs.
    Eval {
        /// Directory of *.result.json files (a *.truth.json may stand in).
        #[arg(long)]
        results: PathBuf,
        /// Directory of *.truth.json files.
        #[arg(long)]
        truth: PathBuf,
        /// Output directory for metrics.csv, metrics_visible.csv, summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Viewpoint bin widths in degrees.
        #[arg(long, value_delimiter = ',', default_value = "20,40")]
        bins: Vec<f64>,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PARTFIT_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()
        {
            eprintln!("error: building {jobs}-thread pool: {e}");
            std::process::exit(1);
        }
    }
    match dispatch(cli.command) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Synth { config, out, seed } => synth::run(&config, &out, seed),
        Command::TrainParts { corpus, out, config, seed } => {
            train::run(&corpus, &out, config.as_ref(), seed)
        }
        Command::SelectLandmarks { ap, basis, out, config, lambda, tau } => {
            select::run(&ap, &basis, &out, config.as_ref(), lambda, tau)
        }
        Command::Fit { hypotheses, basis, out, config, svg, edges } => {
            fit::run(&hypotheses, &basis, &out, config.as_ref(), svg.as_ref(), edges.as_ref())
        }
        Command::Eval { results, truth, out, bins } => eval::run(&results, &truth, &out, &bins),
        Command::Replay { manifest } => replay(&manifest),
    }
}

fn replay(path: &PathBuf) -> Result<String> {
    let m = RunManifest::load(path)?;
    let input = |name: &str| -> Result<PathBuf> {
        m.inputs
            .get(name)
            .cloned()
            .with_context(|| format!("manifest lacks input {name:?}"))
    };
    let extra_path = |name: &str| -> Option<PathBuf> {
        m.extra.get(name).and_then(|v| v.as_str()).map(PathBuf::from)
    };
    match m.command.as_str() {
        "synth" => {
            let config = m.config.clone().context("synth manifest lacks a config path")?;
            synth::run(&config, &m.out, m.seed)
        }
        "train-parts" => train::run(&input("corpus")?, &m.out, m.config.as_ref(), m.seed),
        "select-landmarks" => {
            let lambda = m.extra.get("lambda").and_then(|v| v.as_f64());
            let tau = m.extra.get("tau").and_then(|v| v.as_f64());
            select::run(&input("ap")?, &input("basis")?, &m.out, m.config.as_ref(), lambda, tau)
        }
        "fit" => fit::run(
            &input("hypotheses")?,
            &input("basis")?,
            &m.out,
            m.config.as_ref(),
            extra_path("svg").as_ref(),
            extra_path("edges").as_ref(),
        ),
        "eval" => {
            let bins: Vec<f64> = m
                .extra
                .get("bins")
                .map(|v| serde_json::from_value(v.clone()))
                .transpose()?
                .unwrap_or_else(|| vec![20.0, 40.0]);
            eval::run(&input("results")?, &input("truth")?, &m.out, &bins)
        }
        other => bail!("manifest records unknown command {other:?}"),
    }
}
