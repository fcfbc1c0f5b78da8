//! Three-stage fitting: a mean-shape solve over every landmark fixes a
//! coarse viewpoint, a visibility-restricted mean-shape solve refines it,
//! then full-basis solves alternate with hypothesis pruning on a shrinking
//! radius schedule. The final motion matrices are factored into per-basis
//! scales and rotations, the camera-frame reconstruction is aligned to the
//! canonical frame by Procrustes, and the translation is reported exactly
//! as the solver left it.

use nalgebra::{Matrix2xX, Matrix3, Matrix3xX};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    align_to_canonical, compose_projection, factor_motion, PoseShapeResult, ShapeBasis,
};
use crate::solver::{solve, HypothesisSet, SolveResult, SolverConfig};
use crate::{Error, Result};

/// Azimuth and elevation (degrees) of a camera rotation under the
/// `R = Rx(elevation) * Ry(azimuth)` convention. Reads only the third row,
/// so the azimuth is elevation-independent away from the poles.
pub fn azimuth_elevation(rotation: &Matrix3<f64>) -> (f64, f64) {
    let r3 = rotation.row(2);
    let azimuth = (-r3[0]).atan2(r3[2]).to_degrees();
    let elevation = r3[1].clamp(-1.0, 1.0).asin().to_degrees();
    (azimuth, elevation)
}

/// One viewpoint bin of a visibility table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisibilityEntry {
    pub azimuth: f64,
    pub elevation: f64,
    pub visible: Vec<bool>,
}

/// Viewpoint-indexed visibility masks. Lookup returns the entry nearest in
/// (circular azimuth, elevation) angle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<VisibilityEntry>", into = "Vec<VisibilityEntry>")]
pub struct VisibilityTable {
    entries: Vec<VisibilityEntry>,
}

impl From<VisibilityTable> for Vec<VisibilityEntry> {
    fn from(t: VisibilityTable) -> Self {
        t.entries
    }
}

impl TryFrom<Vec<VisibilityEntry>> for VisibilityTable {
    type Error = Error;

    fn try_from(entries: Vec<VisibilityEntry>) -> Result<Self> {
        VisibilityTable::new(entries)
    }
}

impl VisibilityTable {
    pub fn new(entries: Vec<VisibilityEntry>) -> Result<Self> {
        let p = match entries.first() {
            None => return Err(Error::InvalidInput("empty visibility table".into())),
            Some(e) => e.visible.len(),
        };
        if entries.iter().any(|e| e.visible.len() != p) {
            return Err(Error::DimensionMismatch(
                "visibility table entries disagree on landmark count".into(),
            ));
        }
        Ok(Self { entries })
    }

    /// Single-entry table marking every landmark visible from everywhere.
    pub fn all_visible(p: usize) -> Self {
        Self {
            entries: vec![VisibilityEntry { azimuth: 0.0, elevation: 0.0, visible: vec![true; p] }],
        }
    }

    pub fn landmark_count(&self) -> usize {
        self.entries[0].visible.len()
    }

    pub fn entries(&self) -> &[VisibilityEntry] {
        &self.entries
    }

    /// Mask of the entry nearest to the query viewpoint; azimuth distance
    /// wraps at 360 degrees, ties keep the earliest entry.
    pub fn lookup(&self, azimuth: f64, elevation: f64) -> &[bool] {
        let mut best = (f64::INFINITY, 0usize);
        for (i, e) in self.entries.iter().enumerate() {
            let mut da = (e.azimuth - azimuth).rem_euclid(360.0);
            if da > 180.0 {
                da = 360.0 - da;
            }
            let de = e.elevation - elevation;
            let d = da * da + de * de;
            if d < best.0 {
                best = (d, i);
            }
        }
        &self.entries[best.1].visible
    }
}

/// Heuristic visibility from local surface normals: each landmark gets the
/// plane normal of its nearest neighbors, oriented away from the cloud
/// centroid, and is visible when that normal faces the camera (positive dot
/// with the third rotation row; the frontal view sees the z > 0 half).
/// Landmarks whose normal cannot be oriented are kept visible.
pub fn estimate_visibility(points: &Matrix3xX<f64>, rotation: &Matrix3<f64>) -> Vec<bool> {
    let p = points.ncols();
    let view = rotation.row(2).transpose();
    let centroid = points.column_mean();
    let scale = points.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let k = 8.min(p.saturating_sub(1));
    (0..p)
        .map(|j| {
            if k < 2 {
                return true;
            }
            let pj = points.column(j);
            let mut order: Vec<usize> = (0..p).filter(|&i| i != j).collect();
            order.sort_by(|&a, &b| {
                let da = (points.column(a) - pj).norm_squared();
                let db = (points.column(b) - pj).norm_squared();
                da.total_cmp(&db).then(a.cmp(&b))
            });
            // Plane fit over the landmark and its k nearest neighbors: the
            // normal is the least-variance direction. Gaussian distance
            // weights keep the far side of an uneven neighborhood from
            // tilting the plane.
            let hood: Vec<usize> =
                std::iter::once(j).chain(order.into_iter().take(k)).collect();
            let bandwidth = hood
                .iter()
                .map(|&i| (points.column(i) - pj).norm())
                .sum::<f64>()
                / k as f64;
            let weights: Vec<f64> = hood
                .iter()
                .map(|&i| {
                    let d = (points.column(i) - pj).norm() / bandwidth.max(1e-12);
                    (-d * d).exp()
                })
                .collect();
            let wsum: f64 = weights.iter().sum();
            let mean = hood
                .iter()
                .zip(&weights)
                .fold(nalgebra::Vector3::zeros(), |a, (&i, &w)| a + points.column(i) * w)
                / wsum;
            let mut cov = Matrix3::zeros();
            for (&i, &w) in hood.iter().zip(&weights) {
                let c = points.column(i) - mean;
                cov += c * c.transpose() * w;
            }
            let eig = cov.symmetric_eigen();
            let mut min_idx = 0;
            for i in 1..3 {
                if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
                    min_idx = i;
                }
            }
            let normal = eig.eigenvectors.column(min_idx).into_owned();
            let orient = normal.dot(&(pj - centroid));
            if orient.abs() <= 1e-9 * (1.0 + scale) {
                return true;
            }
            let outward = normal * orient.signum();
            outward.dot(&view) > 0.0
        })
        .collect()
}

/// Drops every hypothesis farther than `radius` (inclusive) from its
/// landmark's predicted location. A landmark whose hypotheses would all be
/// dropped keeps its single nearest one instead, so no landmark ever goes
/// empty. Returns the pruned set and the kept indices per landmark.
pub fn prune_hypotheses(
    set: &HypothesisSet,
    predictions: &Matrix2xX<f64>,
    radius: f64,
) -> Result<(HypothesisSet, Vec<Vec<usize>>)> {
    if predictions.ncols() != set.p() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} landmarks",
            predictions.ncols(),
            set.p()
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::Config("prune radius must be positive".into()));
    }
    let mut pruned = Vec::with_capacity(set.p());
    let mut kept_all = Vec::with_capacity(set.p());
    for (j, lm) in set.landmarks().iter().enumerate() {
        let pred = predictions.column(j);
        let dist =
            |h: usize| (lm.location(h) - pred).norm();
        let mut kept: Vec<usize> = (0..lm.len()).filter(|&h| dist(h) <= radius).collect();
        if kept.is_empty() {
            let nearest = (0..lm.len())
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)))
                .unwrap();
            kept.push(nearest);
        }
        pruned.push(lm.subset(&kept)?);
        kept_all.push(kept);
    }
    Ok((HypothesisSet::new(pruned)?, kept_all))
}

/// Where the visibility mask comes from in stage two.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilitySource {
    /// Viewpoint-binned lookup table; takes precedence when provided.
    Table(VisibilityTable),
    /// Surface-normal heuristic on the mean shape.
    NormalHeuristic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub solver: SolverConfig,
    /// Pruning radii (pixels) for the full-basis rounds.
    pub schedule: Vec<f64>,
    pub visibility: VisibilitySource,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            // Residual balancing is on here even though the bare solver
            // defaults leave it off: the coupling scale varies wildly with
            // basis energy across the three stages, and a fixed rho stalls
            // the primal residual on image-scale shapes.
            solver: SolverConfig { adapt_rho: true, ..SolverConfig::default() },
            schedule: vec![64.0, 32.0, 16.0],
            visibility: VisibilitySource::NormalHeuristic,
        }
    }
}

/// Diagnostics for one solve inside [`infer`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub prune_radius: Option<f64>,
    pub hypotheses: usize,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Full inference output: the reported pose plus everything needed to
/// audit it.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub result: PoseShapeResult,
    /// Per-basis scale from factoring each motion matrix.
    pub scales: Vec<f64>,
    /// Per-basis rotation from the same factorization.
    pub basis_rotations: Vec<Matrix3<f64>>,
    /// Landmark ids (original indexing) the restricted solves used.
    pub visible_ids: Vec<usize>,
    /// Predicted 2D location for every landmark, visible or not, from the
    /// final motions applied to the full basis.
    pub predictions: Matrix2xX<f64>,
    pub stages: Vec<StageRecord>,
    /// Final solve on the restricted problem.
    pub last_solve: SolveResult,
}

fn total_hypotheses(set: &HypothesisSet) -> usize {
    set.landmarks().iter().map(|l| l.len()).sum()
}

/// Runs the three-stage fit against one instance's hypotheses.
pub fn infer(basis: &ShapeBasis, set: &HypothesisSet, cfg: &InferConfig) -> Result<FitOutput> {
    if basis.p() != set.p() {
        return Err(Error::DimensionMismatch(format!(
            "{} hypothesis landmarks for a {}-landmark basis",
            set.p(),
            basis.p()
        )));
    }
    cfg.solver.validate()?;
    let mut stages = Vec::new();

    // Stage 1: mean shape, every landmark. Only the coarse viewpoint
    // matters here; clutter hypotheses get averaged down by the simplex
    // weights.
    let mean_basis = basis.mean_only();
    let s1 = solve(set, &mean_basis, &cfg.solver)?;
    stages.push(StageRecord {
        stage: 1,
        prune_radius: None,
        hypotheses: total_hypotheses(set),
        objective: s1.objective,
        iterations: s1.iterations,
        converged: s1.converged,
    });
    let (_, rot1) = factor_motion(&s1.state.motions[0])?;
    let (az, el) = azimuth_elevation(&rot1);

    let visible = match &cfg.visibility {
        VisibilitySource::Table(table) => {
            if table.landmark_count() != basis.p() {
                return Err(Error::DimensionMismatch(
                    "visibility table landmark count does not match the basis".into(),
                ));
            }
            table.lookup(az, el).to_vec()
        }
        VisibilitySource::NormalHeuristic => estimate_visibility(basis.mean_shape(), &rot1),
    };

    // Stage 2: mean shape again, occluded landmarks dropped.
    let vis_basis = basis.restrict(&visible)?;
    let (vis_set, visible_ids) = set.restrict(&visible)?;
    let vis_mean = vis_basis.mean_only();
    let s2 = solve(&vis_set, &vis_mean, &cfg.solver)?;
    stages.push(StageRecord {
        stage: 2,
        prune_radius: None,
        hypotheses: total_hypotheses(&vis_set),
        objective: s2.objective,
        iterations: s2.iterations,
        converged: s2.converged,
    });
    let mut predictions =
        compose_projection(&s2.state.motions, &s2.state.translation, &vis_mean)?;

    // Stage 3: full basis with progressively tighter pruning.
    let mut current = vis_set;
    let mut last: Option<SolveResult> = None;
    for &radius in &cfg.schedule {
        let (pruned, _) = prune_hypotheses(&current, &predictions, radius)?;
        let s = solve(&pruned, &vis_basis, &cfg.solver)?;
        stages.push(StageRecord {
            stage: 3,
            prune_radius: Some(radius),
            hypotheses: total_hypotheses(&pruned),
            objective: s.objective,
            iterations: s.iterations,
            converged: s.converged,
        });
        predictions =
            compose_projection(&s.state.motions, &s.state.translation, &vis_basis)?;
        current = pruned;
        last = Some(s);
    }
    let last = match last {
        Some(s) => s,
        // Empty schedule: still run the full basis once, unpruned.
        None => {
            let s = solve(&current, &vis_basis, &cfg.solver)?;
            stages.push(StageRecord {
                stage: 3,
                prune_radius: None,
                hypotheses: total_hypotheses(&current),
                objective: s.objective,
                iterations: s.iterations,
                converged: s.converged,
            });
            s
        }
    };

    // Factor every motion, reconstruct the camera-frame shape over all
    // landmarks, and align the visible part to the canonical frame.
    let mut scales = Vec::with_capacity(basis.k());
    let mut basis_rotations = Vec::with_capacity(basis.k());
    for motion in &last.state.motions {
        let (c, r) = factor_motion(motion)?;
        scales.push(c);
        basis_rotations.push(r);
    }
    let mut camera_full = Matrix3xX::zeros(basis.p());
    let mut camera_vis = Matrix3xX::zeros(vis_basis.p());
    for i in 0..basis.k() {
        camera_full += scales[i] * basis_rotations[i] * basis.basis(i);
        camera_vis += scales[i] * basis_rotations[i] * vis_basis.basis(i);
    }
    let canonical_vis = vis_basis.combine(&scales)?;
    let rotation = align_to_canonical(&camera_vis, &canonical_vis)?;
    let predictions =
        compose_projection(&last.state.motions, &last.state.translation, basis)?;

    let result = PoseShapeResult {
        rotation,
        // The translation stays exactly as the solver estimated it; the
        // canonical alignment changes only the rotation report.
        translation: last.state.translation,
        coefficients: scales.clone(),
        shape: camera_full,
        visibility: visible,
    };
    Ok(FitOutput {
        result,
        scales,
        basis_rotations,
        visible_ids,
        predictions,
        stages,
        last_solve: last,
    })
}
