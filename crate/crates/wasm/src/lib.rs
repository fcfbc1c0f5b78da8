//! Browser bindings: three small interactive surfaces over the fitting
//! stack. Each export takes plain scalars and returns a JSON string, with
//! failures encoded as `{"error": "..."}` so the page needs exactly one
//! code path and the crate stays testable on non-wasm targets.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use partfit::bench::{
    azimuth_error_deg, family_and_basis, generate_instance, mean_apd, SyntheticSpec,
};
use partfit::geometry::Motion;
use partfit::pipeline::{azimuth_elevation, infer, InferConfig, VisibilitySource, VisibilityTable};
use partfit::selection::{solve_lp_relaxation, threshold_and_repair, FacilityInstance};
use partfit::solver::{prox_spectral, singular_values_2x3, SolverConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("demo payloads serialize")
}

fn fail(msg: String) -> String {
    to_json(&serde_json::json!({ "error": msg }))
}

#[derive(Serialize)]
struct ProxDemo {
    input: [[f64; 3]; 2],
    output: [[f64; 3]; 2],
    sv_input: [f64; 2],
    sv_output: [f64; 2],
    objective_input: f64,
    objective_output: f64,
}

/// Spectral prox of a 2x3 matrix: returns input/output entries, singular
/// values, and the prox objective at both points.
#[wasm_bindgen]
pub fn prox_demo(entries: &[f64], mu: f64) -> String {
    run_prox(entries, mu).unwrap_or_else(fail)
}

fn run_prox(entries: &[f64], mu: f64) -> Result<String, String> {
    if entries.len() != 6 {
        return Err("expected 6 row-major entries".into());
    }
    if !mu.is_finite() || mu < 0.0 {
        return Err("mu must be finite and nonnegative".into());
    }
    let a = Motion::from_row_slice(entries);
    let z = prox_spectral(&a, mu);
    let sv_in = singular_values_2x3(&a);
    let sv_out = singular_values_2x3(&z);
    let obj = |m: &Motion| 0.5 * (m - a).norm_squared() + mu * singular_values_2x3(m).0;
    let rows =
        |m: &Motion| [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]]];
    Ok(to_json(&ProxDemo {
        input: rows(&a),
        output: rows(&z),
        sv_input: [sv_in.0, sv_in.1],
        sv_output: [sv_out.0, sv_out.1],
        objective_input: obj(&a),
        objective_output: obj(&z),
    }))
}

#[derive(Serialize)]
struct HypPoint {
    landmark: usize,
    x: f64,
    y: f64,
    score: f64,
    truth: bool,
}

#[derive(Serialize)]
struct FitDemo {
    truth: Vec<[f64; 2]>,
    predicted: Vec<[f64; 2]>,
    hypotheses: Vec<HypPoint>,
    azimuth_truth: f64,
    azimuth_fit: f64,
    azimuth_error: f64,
    mean_apd: f64,
    iterations: usize,
    converged: bool,
    stage_objectives: Vec<f64>,
}

/// Generates one synthetic instance (seeded) and runs the full fit.
/// `noise` is the hypothesis noise in pixels, `score_gap` the margin of the
/// true hypothesis score over the distractors, `distractors` per landmark.
#[wasm_bindgen]
pub fn fit_demo(seed: u32, noise: f64, score_gap: f64, distractors: u32) -> String {
    run_fit(seed, noise, score_gap, distractors).unwrap_or_else(fail)
}

fn run_fit(seed: u32, noise: f64, score_gap: f64, distractors: u32) -> Result<String, String> {
    if !(0.0..=32.0).contains(&noise) || !(0.0..=1.0).contains(&score_gap) {
        return Err("noise must be in [0, 32] and score_gap in [0, 1]".into());
    }
    let spec = SyntheticSpec {
        landmarks: 28,
        basis_size: 4,
        hypotheses_per_landmark: 1 + distractors.min(12) as usize,
        noise_sigma: noise,
        score_gap,
        shapes_in_family: 20,
        seed: 17,
        ..SyntheticSpec::default()
    };
    let err = |e: partfit::Error| e.to_string();
    let (_, basis, _) = family_and_basis(&spec).map_err(err)?;
    let inst = generate_instance(&basis, &spec, seed as u64).map_err(err)?;
    let cfg = InferConfig {
        solver: SolverConfig { lambda2: 1.0, adapt_rho: true, ..SolverConfig::default() },
        visibility: VisibilitySource::Table(VisibilityTable::all_visible(spec.landmarks)),
        ..InferConfig::default()
    };
    let fit = infer(&basis, &inst.hypotheses, &cfg).map_err(err)?;

    let mut hypotheses = Vec::new();
    for (j, lm) in inst.hypotheses.landmarks().iter().enumerate() {
        let top = lm.top_hypothesis();
        for h in 0..lm.len() {
            let loc = lm.location(h);
            hypotheses.push(HypPoint {
                landmark: j,
                x: loc.x,
                y: loc.y,
                score: lm.scores()[h],
                truth: h == top,
            });
        }
    }
    let points = |m: &nalgebra::Matrix2xX<f64>| -> Vec<[f64; 2]> {
        m.column_iter().map(|c| [c.x, c.y]).collect()
    };
    Ok(to_json(&FitDemo {
        truth: points(&inst.projections),
        predicted: points(&fit.predictions),
        azimuth_truth: inst.azimuth,
        azimuth_fit: azimuth_elevation(&fit.result.rotation).0,
        azimuth_error: azimuth_error_deg(&inst.rotation, &fit.result.rotation),
        mean_apd: mean_apd(&fit.predictions, &inst.projections, None).map_err(err)?,
        iterations: fit.stages.iter().map(|s| s.iterations).sum(),
        converged: fit.stages.iter().all(|s| s.converged),
        stage_objectives: fit.stages.iter().map(|s| s.objective).collect(),
        hypotheses,
    }))
}

#[derive(Serialize)]
struct SelectionDemo {
    points: Vec<[f64; 2]>,
    aps: Vec<f64>,
    fractional: Vec<f64>,
    selected: Vec<bool>,
    assignment: Vec<usize>,
    lp_objective: f64,
    rounded_objective: f64,
    duality_gap: f64,
}

/// Landmark selection on a seeded synthetic layout: candidate landmarks on
/// a noisy ring with synthetic detector APs; `lambda` weighs the coverage
/// distances, `tau` is the opening threshold.
#[wasm_bindgen]
pub fn selection_demo(seed: u32, lambda: f64, tau: f64) -> String {
    run_selection(seed, lambda, tau).unwrap_or_else(fail)
}

fn run_selection(seed: u32, lambda: f64, tau: f64) -> Result<String, String> {
    if !(lambda > 0.0 && lambda.is_finite()) || !(0.0..=1.0).contains(&tau) {
        return Err("lambda must be positive and tau in [0, 1]".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let n = 14usize;
    let mut points = Vec::with_capacity(n);
    let mut aps = Vec::with_capacity(n);
    for i in 0..n {
        let angle = std::f64::consts::TAU * i as f64 / n as f64;
        let radius = rng.gen_range(62.0..80.0);
        points.push(Vector2::new(
            radius * angle.cos() + rng.gen_range(-6.0..6.0),
            radius * angle.sin() + rng.gen_range(-6.0..6.0),
        ));
        aps.push(rng.gen_range(0.35..0.95));
    }
    let pairwise = nalgebra::DMatrix::from_fn(n, n, |u, v| (points[u] - points[v]).norm() / 80.0);
    let unary: Vec<f64> = aps.iter().map(|ap| 1.0 - ap).collect();
    let err = |e: partfit::Error| e.to_string();
    let inst = FacilityInstance::new(unary, pairwise, lambda).map_err(err)?;
    let frac = solve_lp_relaxation(&inst).map_err(err)?;
    let rounded = threshold_and_repair(&frac, &inst, tau).map_err(err)?;
    Ok(to_json(&SelectionDemo {
        points: points.iter().map(|p| [p.x, p.y]).collect(),
        aps,
        fractional: frac.y.clone(),
        selected: rounded.selected.clone(),
        assignment: rounded.assignment.clone(),
        lp_objective: frac.objective,
        rounded_objective: rounded.objective,
        duality_gap: frac.duality_gap,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prox_demo_shrinks_the_top_singular_value() {
        let v: serde_json::Value =
            serde_json::from_str(&prox_demo(&[3.0, 0.0, 0.0, 0.0, 1.0, 0.0], 1.0)).unwrap();
        assert!(v["error"].is_null());
        assert!((v["sv_input"][0].as_f64().unwrap() - 3.0).abs() < 1e-12);
        assert!((v["sv_output"][0].as_f64().unwrap() - 2.0).abs() < 1e-9);
        assert!(v["objective_output"].as_f64().unwrap() <= v["objective_input"].as_f64().unwrap());

        let bad: serde_json::Value = serde_json::from_str(&prox_demo(&[1.0; 5], 1.0)).unwrap();
        assert!(bad["error"].is_string());
    }

    #[test]
    fn fit_demo_recovers_a_clean_instance() {
        let v: serde_json::Value = serde_json::from_str(&fit_demo(4, 0.0, 1.0, 7)).unwrap();
        assert!(v["error"].is_null(), "{v}");
        assert!(v["converged"].as_bool().unwrap());
        assert!(v["mean_apd"].as_f64().unwrap() < 0.5);
        assert!(v["azimuth_error"].as_f64().unwrap() < 1.0);
        assert_eq!(v["truth"].as_array().unwrap().len(), 28);
        assert_eq!(v["hypotheses"].as_array().unwrap().len(), 28 * 8);
    }

    #[test]
    fn selection_demo_responds_to_lambda() {
        let low: serde_json::Value =
            serde_json::from_str(&selection_demo(1, 0.05, 0.5)).unwrap();
        let high: serde_json::Value =
            serde_json::from_str(&selection_demo(1, 8.0, 0.5)).unwrap();
        assert!(low["error"].is_null(), "{low}");
        let count = |v: &serde_json::Value| {
            v["selected"].as_array().unwrap().iter().filter(|s| s.as_bool().unwrap()).count()
        };
        assert!(count(&low) <= count(&high), "more coverage weight, more landmarks");
        assert!(count(&low) >= 1);
        assert!(
            low["lp_objective"].as_f64().unwrap()
                <= low["rounded_objective"].as_f64().unwrap() + 1e-9
        );
    }
}
