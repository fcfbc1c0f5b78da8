//! Synthetic benchmark: deformable shape families at image scale, a PCA
//! basis learned from them, and per-instance hypothesis sets with
//! controlled noise, clutter, and occlusion. Everything is deterministic
//! in the spec seed; instance `i` draws from its own ChaCha stream so
//! instances can be generated independently and in parallel.

use nalgebra::{DMatrix, Matrix2xX, Matrix3, Matrix3xX, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::ShapeBasis;
use crate::pipeline::{estimate_visibility, VisibilityTable};
use crate::solver::{HypothesisSet, LandmarkHypotheses};
use crate::{Error, Result};

/// Which landmarks each synthetic instance hides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionMode {
    /// Everything visible.
    None,
    /// Surface-normal heuristic on the instance's own shape.
    Hemisphere,
    /// Lookup in the spec's visibility table.
    Table,
}

/// Full description of a synthetic benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub landmarks: usize,
    /// Basis matrices to learn, mean included.
    pub basis_size: usize,
    pub instances: usize,
    pub hypotheses_per_landmark: usize,
    /// Detection noise on the true hypothesis, pixels.
    pub noise_sigma: f64,
    pub occlusion: OcclusionMode,
    pub seed: u64,
    pub azimuth_range: (f64, f64),
    pub elevation_range: (f64, f64),
    /// Uniform range of the mean-shape coefficient (global scale).
    pub scale_range: (f64, f64),
    /// Image translation drawn uniformly from the centered square of this
    /// half-width.
    pub translation_range: f64,
    /// Standard deviation of the deformation coefficients, relative to the
    /// global scale (bases have unit Frobenius norm).
    pub coeff_sigma: f64,
    /// Isotropic out-of-basis perturbation of the true 3D shape, in the
    /// same units as the shape itself. Zero keeps instances exactly
    /// representable by the basis.
    pub model_mismatch: f64,
    /// Family members used to learn the basis.
    pub shapes_in_family: usize,
    pub deform_fields: usize,
    /// Displacement scale of the family deformations.
    pub deform_scale: f64,
    /// Distractor scores lie in `[1 - gap - 0.5, 1 - gap]` while the true
    /// hypothesis scores exactly 1.
    pub score_gap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<VisibilityTable>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            landmarks: 50,
            basis_size: 10,
            instances: 100,
            hypotheses_per_landmark: 8,
            noise_sigma: 1.0,
            occlusion: OcclusionMode::None,
            seed: 11,
            azimuth_range: (-180.0, 180.0),
            elevation_range: (-20.0, 40.0),
            scale_range: (0.8, 1.25),
            translation_range: 40.0,
            coeff_sigma: 0.05,
            model_mismatch: 0.0,
            shapes_in_family: 40,
            deform_fields: 12,
            deform_scale: 6.0,
            score_gap: 0.1,
            table: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.landmarks < 4 || self.basis_size == 0 || self.hypotheses_per_landmark == 0 {
            return Err(Error::Config(
                "need at least 4 landmarks, 1 basis, 1 hypothesis per landmark".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.deform_scale < 0.0 || self.model_mismatch < 0.0 {
            return Err(Error::Config("negative scale parameter".into()));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::Config("bad scale range".into()));
        }
        if self.occlusion == OcclusionMode::Table && self.table.is_none() {
            return Err(Error::Config("table occlusion mode needs a table".into()));
        }
        if let Some(t) = &self.table {
            if t.landmark_count() != self.landmarks {
                return Err(Error::DimensionMismatch(
                    "visibility table landmark count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller on the given generator.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // 1 - u keeps the log argument in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Evenly spread points on the unit sphere (Fibonacci lattice).
pub fn sphere_cloud(n: usize) -> Matrix3xX<f64> {
    let golden = std::f64::consts::PI * (1.0 + 5.0f64.sqrt());
    Matrix3xX::from_fn(n, |r, i| {
        let t = (2.0 * i as f64 + 1.0) / (2.0 * n as f64);
        let z = 1.0 - 2.0 * t;
        let rad = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden * i as f64;
        match r {
            0 => rad * phi.cos(),
            1 => rad * phi.sin(),
            _ => z,
        }
    })
}

/// Grid of points on the surface of an axis-aligned box with the given
/// half-extents, `per_edge` samples along each face direction.
pub fn box_cloud(half: Vector3<f64>, per_edge: usize) -> Matrix3xX<f64> {
    let n = per_edge.max(2);
    let coord = |i: usize, h: f64| -h + 2.0 * h * i as f64 / (n - 1) as f64;
    let mut cols: Vec<Vector3<f64>> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            cols.push(Vector3::new(half.x, coord(i, half.y), coord(j, half.z)));
            cols.push(Vector3::new(-half.x, coord(i, half.y), coord(j, half.z)));
            cols.push(Vector3::new(coord(i, half.x), half.y, coord(j, half.z)));
            cols.push(Vector3::new(coord(i, half.x), -half.y, coord(j, half.z)));
            cols.push(Vector3::new(coord(i, half.x), coord(j, half.y), half.z));
            cols.push(Vector3::new(coord(i, half.x), coord(j, half.y), -half.z));
        }
    }
    cols.sort_by(|a, b| (a.x, a.y, a.z).partial_cmp(&(b.x, b.y, b.z)).unwrap());
    cols.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    Matrix3xX::from_columns(&cols)
}

/// Ellipsoid axes of the base shape, in pixels under unit scale. Image
/// scale (not unit scale) matters: the spectral regularizer's shrinkage on
/// the motion matrices displaces projections by roughly lambda2 divided by
/// the basis energy, so a shape of tens-of-pixels extent keeps that bias
/// far below a pixel.
pub const FAMILY_AXES: Vector3<f64> = Vector3::new(60.0, 22.0, 18.0);

/// A family of smoothly deformed ellipsoids sharing one landmark layout.
/// The deformation fields (Gaussian bumps with random centers and
/// directions) are drawn once from the seed; each member weighs them with
/// its own normal coefficients.
pub fn shape_family(
    landmarks: usize,
    members: usize,
    fields: usize,
    deform_scale: f64,
    seed: u64,
) -> Vec<Matrix3xX<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = sphere_cloud(landmarks);
    for mut col in base.column_iter_mut() {
        col.component_mul_assign(&FAMILY_AXES);
    }
    // Bump width comparable to the mid axis keeps the fields smooth across
    // neighboring landmarks.
    let width = 18.0;
    let unit = |rng: &mut ChaCha8Rng| {
        let v = Vector3::new(standard_normal(rng), standard_normal(rng), standard_normal(rng));
        let n = v.norm();
        if n < 1e-12 {
            Vector3::z()
        } else {
            v / n
        }
    };
    struct Bump {
        center: Vector3<f64>,
        direction: Vector3<f64>,
    }
    let bumps: Vec<Bump> = (0..fields)
        .map(|_| Bump {
            center: unit(&mut rng).component_mul(&FAMILY_AXES),
            direction: unit(&mut rng),
        })
        .collect();
    (0..members)
        .map(|_| {
            let weights: Vec<f64> =
                (0..fields).map(|_| deform_scale * standard_normal(&mut rng)).collect();
            let mut shape = base.clone();
            for j in 0..landmarks {
                let x = base.column(j).into_owned();
                let mut d = Vector3::zeros();
                for (b, w) in bumps.iter().zip(&weights) {
                    let g = (-(x - b.center).norm_squared() / (2.0 * width * width)).exp();
                    d += *w * g * b.direction;
                }
                let mut col = shape.column_mut(j);
                col += d;
            }
            let c = shape.column_mean();
            for mut col in shape.column_iter_mut() {
                col -= c;
            }
            shape
        })
        .collect()
}

/// PCA basis over a shape family. The first basis is the mean shape itself
/// (so coefficients `(1, 0, ..)` reproduce it); the rest are unit-Frobenius
/// principal directions of the residuals. Returns `true` when the family
/// had less variation than requested and the basis came up short.
pub fn learn_basis(shapes: &[Matrix3xX<f64>], k: usize) -> Result<(ShapeBasis, bool)> {
    if shapes.is_empty() || k == 0 {
        return Err(Error::InvalidInput("basis needs shapes and k >= 1".into()));
    }
    let p = shapes[0].ncols();
    let mut centered: Vec<Matrix3xX<f64>> = Vec::with_capacity(shapes.len());
    for s in shapes {
        if s.ncols() != p {
            return Err(Error::DimensionMismatch("family members disagree on p".into()));
        }
        let c = s.column_mean();
        let mut m = s.clone();
        for mut col in m.column_iter_mut() {
            col -= c;
        }
        centered.push(m);
    }
    let mut mean = Matrix3xX::zeros(p);
    for s in &centered {
        mean += s;
    }
    mean /= shapes.len() as f64;

    let mut bases = vec![mean.clone()];
    if k > 1 {
        // Rows are vectorized residuals (column-major), so right singular
        // vectors reshape straight back into 3 x p matrices.
        let mut data = DMatrix::zeros(shapes.len(), 3 * p);
        for (s, m) in centered.iter().enumerate() {
            let r = m - &mean;
            for (i, v) in r.as_slice().iter().enumerate() {
                data[(s, i)] = *v;
            }
        }
        let svd = nalgebra::SVD::new(data, false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let s = &svd.singular_values;
        for i in 0..s.len().min(k - 1) {
            if s[i] <= 1e-9 * s[0].max(1e-300) {
                break;
            }
            let row = v_t.row(i);
            bases.push(Matrix3xX::from_column_slice(row.transpose().as_slice()));
        }
    }
    let short = bases.len() < k;
    if short {
        log::warn!("family rank supports only {} of {k} bases", bases.len());
    }
    Ok((ShapeBasis::new(mean, bases)?, short))
}

/// Ground truth and observations for one synthetic instance.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub rotation: Matrix3<f64>,
    pub translation: Vector2<f64>,
    pub coefficients: Vec<f64>,
    /// Canonical-frame true shape, mismatch included.
    pub shape: Matrix3xX<f64>,
    /// True 2D landmark locations.
    pub projections: Matrix2xX<f64>,
    pub visibility: Vec<bool>,
    pub hypotheses: HypothesisSet,
    pub azimuth: f64,
    pub elevation: f64,
}

/// Camera rotation for the generation convention
/// `R = Rx(elevation) * Ry(azimuth)`, angles in degrees.
pub fn rotation_from_angles(azimuth_deg: f64, elevation_deg: f64) -> Matrix3<f64> {
    let a = azimuth_deg.to_radians();
    let e = elevation_deg.to_radians();
    let ry = Matrix3::new(a.cos(), 0.0, a.sin(), 0.0, 1.0, 0.0, -a.sin(), 0.0, a.cos());
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, e.cos(), -e.sin(), 0.0, e.sin(), e.cos());
    rx * ry
}

fn uniform_in<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.gen::<f64>()
}

/// Generates instance `index` of the spec against a learned basis. Each
/// index owns a ChaCha stream, so generation order does not matter.
pub fn generate_instance(
    basis: &ShapeBasis,
    spec: &SyntheticSpec,
    index: u64,
) -> Result<SyntheticInstance> {
    spec.validate()?;
    if basis.p() != spec.landmarks {
        return Err(Error::DimensionMismatch(format!(
            "{}-landmark basis for a {}-landmark spec",
            basis.p(),
            spec.landmarks
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Stream 0 belongs to the family; instances start at 1.
    rng.set_stream(index + 1);

    let azimuth = uniform_in(&mut rng, spec.azimuth_range);
    let elevation = uniform_in(&mut rng, spec.elevation_range);
    let scale = uniform_in(&mut rng, spec.scale_range);
    let translation = Vector2::new(
        uniform_in(&mut rng, (-spec.translation_range, spec.translation_range)),
        uniform_in(&mut rng, (-spec.translation_range, spec.translation_range)),
    );
    let mut coefficients = vec![scale];
    for _ in 1..basis.k() {
        coefficients.push(scale * spec.coeff_sigma * standard_normal(&mut rng));
    }
    let mut shape = basis.combine(&coefficients)?;
    if spec.model_mismatch > 0.0 {
        for mut col in shape.column_iter_mut() {
            col += spec.model_mismatch
                * Vector3::new(
                    standard_normal(&mut rng),
                    standard_normal(&mut rng),
                    standard_normal(&mut rng),
                );
        }
        // Keep the canonical shape centered; translation owns any offset.
        let c = shape.column_mean();
        for mut col in shape.column_iter_mut() {
            col -= c;
        }
    }

    let rotation = rotation_from_angles(azimuth, elevation);
    let r2 = rotation.fixed_rows::<2>(0).into_owned();
    let mut projections = r2 * &shape;
    for mut col in projections.column_iter_mut() {
        col += translation;
    }

    let visibility: Vec<bool> = match spec.occlusion {
        OcclusionMode::None => vec![true; spec.landmarks],
        OcclusionMode::Hemisphere => estimate_visibility(&shape, &rotation),
        OcclusionMode::Table => {
            spec.table.as_ref().unwrap().lookup(azimuth, elevation).to_vec()
        }
    };

    // Distractors land uniformly in the ground-truth bounding box inflated
    // by a quarter of its extent plus a fixed margin.
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in projections.column_iter() {
        min_x = min_x.min(c.x);
        max_x = max_x.max(c.x);
        min_y = min_y.min(c.y);
        max_y = max_y.max(c.y);
    }
    let pad = 0.25 * (max_x - min_x).max(max_y - min_y) + 20.0;
    let bx = (min_x - pad, max_x + pad);
    let by = (min_y - pad, max_y + pad);

    let n = spec.hypotheses_per_landmark;
    let cov = nalgebra::Matrix2::identity() * spec.noise_sigma.powi(2).max(1.0);
    let mut landmarks = Vec::with_capacity(spec.landmarks);
    for j in 0..spec.landmarks {
        let true_index = if visibility[j] { Some(rng.gen_range(0..n)) } else { None };
        let mut locs = Matrix2xX::zeros(n);
        let mut scores = nalgebra::DVector::zeros(n);
        for h in 0..n {
            if Some(h) == true_index {
                locs[(0, h)] = projections[(0, j)] + spec.noise_sigma * standard_normal(&mut rng);
                locs[(1, h)] = projections[(1, j)] + spec.noise_sigma * standard_normal(&mut rng);
                scores[h] = 1.0;
            } else {
                locs[(0, h)] = uniform_in(&mut rng, bx);
                locs[(1, h)] = uniform_in(&mut rng, by);
                scores[h] = 1.0 - spec.score_gap - 0.5 * rng.gen::<f64>();
            }
        }
        landmarks.push(LandmarkHypotheses::new(j, locs, scores, cov)?);
    }

    Ok(SyntheticInstance {
        rotation,
        translation,
        coefficients,
        shape,
        projections,
        visibility,
        hypotheses: HypothesisSet::new(landmarks)?,
        azimuth,
        elevation,
    })
}

/// Builds the spec's shape family and learned basis (stream 0 of the seed).
pub fn family_and_basis(spec: &SyntheticSpec) -> Result<(Vec<Matrix3xX<f64>>, ShapeBasis, bool)> {
    spec.validate()?;
    let family = shape_family(
        spec.landmarks,
        spec.shapes_in_family,
        spec.deform_fields,
        spec.deform_scale,
        spec.seed,
    );
    let (basis, short) = learn_basis(&family, spec.basis_size)?;
    Ok((family, basis, short))
}

/// Mean pixel distance between predicted and true landmark locations over
/// the masked landmarks (all of them when no mask is given).
pub fn mean_apd(
    predicted: &Matrix2xX<f64>,
    truth: &Matrix2xX<f64>,
    mask: Option<&[bool]>,
) -> Result<f64> {
    if predicted.ncols() != truth.ncols() {
        return Err(Error::DimensionMismatch("prediction and truth landmark counts".into()));
    }
    if let Some(m) = mask {
        if m.len() != truth.ncols() {
            return Err(Error::DimensionMismatch("mask length".into()));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..truth.ncols() {
        if mask.map_or(true, |m| m[j]) {
            total += (predicted.column(j) - truth.column(j)).norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}

/// Circular azimuth difference between two rotations, in degrees within
/// `[0, 180]`.
pub fn azimuth_error_deg(truth: &Matrix3<f64>, estimate: &Matrix3<f64>) -> f64 {
    let (a, _) = crate::pipeline::azimuth_elevation(truth);
    let (b, _) = crate::pipeline::azimuth_elevation(estimate);
    let mut d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d = 360.0 - d;
    }
    d
}

/// Viewpoint bin index for bins of `width` degrees centered on multiples
/// of the width (bin 0 spans `[-width/2, width/2)`). The angle is
/// normalized first so equivalent headings always share a bin, including
/// exactly on a boundary.
pub fn azimuth_bin(azimuth_deg: f64, width: f64) -> usize {
    let n = (360.0 / width).round() as i64;
    let norm = (azimuth_deg + width / 2.0).rem_euclid(360.0);
    ((norm / width).floor() as i64).rem_euclid(n) as usize
}

/// Coarse viewpoint accuracy (matching azimuth bins of `bin_degrees`) and
/// mean absolute circular azimuth error over paired rotations.
pub fn viewpoint_metrics(
    truths: &[Matrix3<f64>],
    estimates: &[Matrix3<f64>],
    bin_degrees: f64,
) -> Result<(f64, f64)> {
    if truths.is_empty() || truths.len() != estimates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} truth rotations, {} estimates",
            truths.len(),
            estimates.len()
        )));
    }
    if bin_degrees <= 0.0 || (360.0 / bin_degrees).fract().abs() > 1e-9 {
        return Err(Error::Config(format!(
            "bin width {bin_degrees} does not divide 360"
        )));
    }
    let mut hits = 0usize;
    let mut err = 0.0;
    for (t, e) in truths.iter().zip(estimates) {
        let (ta, _) = crate::pipeline::azimuth_elevation(t);
        let (ea, _) = crate::pipeline::azimuth_elevation(e);
        if azimuth_bin(ta, bin_degrees) == azimuth_bin(ea, bin_degrees) {
            hits += 1;
        }
        err += azimuth_error_deg(t, e);
    }
    let n = truths.len() as f64;
    Ok((hits as f64 / n, err / n))
}
