//! Shape bases, weak-perspective projection, motion factorization and
//! canonical alignment.
//!
//! A shape instance lives in a low-dimensional space spanned by `k` basis
//! shapes of `p` landmarks each. Under weak perspective the 2D projection is
//! `P = R2 * sum_i c_i B_i + t 1^T` where `R2` is the top two rows of a
//! rotation. The solver works with the linearized form `P = sum_i T_i B_i +
//! t 1^T` where each motion matrix `T_i` replaces `c_i R2`; this module
//! provides the round trip between the two parameterizations.

use nalgebra::{Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A 2x3 motion matrix, the product of a scale and the top two rows of a
/// rotation in the exact (non-relaxed) model.
pub type Motion = Matrix2x3<f64>;

/// Dictionary of basis shapes. When built by [`crate::bench::learn_basis`]
/// the first basis is the mean shape itself and the rest are unit-Frobenius
/// principal directions, so coefficients `(1, 0, ..., 0)` reproduce the mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawShapeBasis", into = "RawShapeBasis")]
pub struct ShapeBasis {
    p: usize,
    mean_shape: Matrix3xX<f64>,
    bases: Vec<Matrix3xX<f64>>,
}

impl ShapeBasis {
    /// Builds a basis and checks the structural invariants: `p >= 4`,
    /// `k >= 1`, consistent dimensions, and a mean shape centered at the
    /// origin (tolerance relative to the coordinate scale).
    pub fn new(mean_shape: Matrix3xX<f64>, bases: Vec<Matrix3xX<f64>>) -> Result<Self> {
        let p = mean_shape.ncols();
        if p < 4 {
            return Err(Error::Config(format!("need at least 4 landmarks, got {p}")));
        }
        if bases.is_empty() {
            return Err(Error::Config("need at least one basis shape".into()));
        }
        for (i, b) in bases.iter().enumerate() {
            if b.ncols() != p {
                return Err(Error::DimensionMismatch(format!(
                    "basis {i} has {} landmarks, mean shape has {p}",
                    b.ncols()
                )));
            }
        }
        let scale = 1.0 + mean_shape.amax();
        let centroid = mean_shape.column_mean();
        if centroid.amax() > 1e-9 * scale {
            return Err(Error::InvalidInput(format!(
                "mean shape centroid {:?} is not at the origin",
                centroid.as_slice()
            )));
        }
        Ok(Self { p, mean_shape, bases })
    }

    /// Internal constructor without the centering check, for landmark
    /// subsets handed to the solver.
    pub(crate) fn new_unchecked(mean_shape: Matrix3xX<f64>, bases: Vec<Matrix3xX<f64>>) -> Self {
        let p = mean_shape.ncols();
        Self { p, mean_shape, bases }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.bases.len()
    }

    pub fn mean_shape(&self) -> &Matrix3xX<f64> {
        &self.mean_shape
    }

    pub fn bases(&self) -> &[Matrix3xX<f64>] {
        &self.bases
    }

    pub fn basis(&self, i: usize) -> &Matrix3xX<f64> {
        &self.bases[i]
    }

    /// Basis restricted to the mean shape only, used by the first two
    /// inference stages.
    pub fn mean_only(&self) -> ShapeBasis {
        Self::new_unchecked(self.mean_shape.clone(), vec![self.mean_shape.clone()])
    }

    /// Basis restricted to the landmarks where `mask` is true. The subset is
    /// not re-centered; it is only meaningful as solver input.
    pub fn restrict(&self, mask: &[bool]) -> Result<ShapeBasis> {
        if mask.len() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries for {} landmarks",
                mask.len(),
                self.p
            )));
        }
        let cols: Vec<usize> = (0..self.p).filter(|&j| mask[j]).collect();
        if cols.len() < 4 {
            return Err(Error::InvalidInput(format!(
                "visibility mask keeps {} landmarks, need at least 4",
                cols.len()
            )));
        }
        let take = |m: &Matrix3xX<f64>| {
            Matrix3xX::from_columns(&cols.iter().map(|&j| m.column(j).into_owned()).collect::<Vec<_>>())
        };
        Ok(Self::new_unchecked(
            take(&self.mean_shape),
            self.bases.iter().map(take).collect(),
        ))
    }

    /// `sum_i c_i B_i` as a 3xp shape.
    pub fn combine(&self, coefficients: &[f64]) -> Result<Matrix3xX<f64>> {
        if coefficients.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} bases",
                coefficients.len(),
                self.k()
            )));
        }
        let mut shape = Matrix3xX::zeros(self.p);
        for (c, b) in coefficients.iter().zip(&self.bases) {
            shape += b * *c;
        }
        Ok(shape)
    }
}

#[derive(Serialize, Deserialize)]
struct RawShapeBasis {
    p: usize,
    k: usize,
    mean_shape: Vec<Vec<f64>>,
    bases: Vec<Vec<Vec<f64>>>,
}

impl From<ShapeBasis> for RawShapeBasis {
    fn from(b: ShapeBasis) -> Self {
        RawShapeBasis {
            p: b.p,
            k: b.k(),
            mean_shape: mat_rows(&b.mean_shape),
            bases: b.bases.iter().map(mat_rows).collect(),
        }
    }
}

impl TryFrom<RawShapeBasis> for ShapeBasis {
    type Error = Error;

    fn try_from(raw: RawShapeBasis) -> Result<Self> {
        let mean = mat_from_rows(&raw.mean_shape, raw.p)?;
        let bases = raw
            .bases
            .iter()
            .map(|b| mat_from_rows(b, raw.p))
            .collect::<Result<Vec<_>>>()?;
        if bases.len() != raw.k {
            return Err(Error::DimensionMismatch(format!(
                "file declares k = {} but carries {} bases",
                raw.k,
                bases.len()
            )));
        }
        ShapeBasis::new(mean, bases)
    }
}

pub(crate) fn mat_rows(m: &Matrix3xX<f64>) -> Vec<Vec<f64>> {
    (0..3).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub(crate) fn mat_from_rows(rows: &[Vec<f64>], p: usize) -> Result<Matrix3xX<f64>> {
    if rows.len() != 3 || rows.iter().any(|r| r.len() != p) {
        return Err(Error::DimensionMismatch(format!(
            "expected a 3x{p} matrix as 3 rows"
        )));
    }
    let mut m = Matrix3xX::zeros(p);
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    Ok(m)
}

/// Final fit: camera-frame rotation relative to the canonical pose, image
/// translation, basis coefficients, reconstructed camera-frame shape and the
/// visibility mask the solve used.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct PoseShapeResult {
    pub rotation: Matrix3<f64>,
    pub translation: Vector2<f64>,
    pub coefficients: Vec<f64>,
    pub shape: Matrix3xX<f64>,
    pub visibility: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    rotation: [[f64; 3]; 3],
    translation: [f64; 2],
    coefficients: Vec<f64>,
    shape: Vec<Vec<f64>>,
    visibility: Vec<bool>,
}

impl From<PoseShapeResult> for RawPose {
    fn from(r: PoseShapeResult) -> Self {
        let rot = |i: usize| [r.rotation[(i, 0)], r.rotation[(i, 1)], r.rotation[(i, 2)]];
        RawPose {
            rotation: [rot(0), rot(1), rot(2)],
            translation: [r.translation.x, r.translation.y],
            coefficients: r.coefficients,
            shape: mat_rows(&r.shape),
            visibility: r.visibility,
        }
    }
}

impl TryFrom<RawPose> for PoseShapeResult {
    type Error = Error;

    fn try_from(raw: RawPose) -> Result<Self> {
        let shape = mat_from_rows(&raw.shape, raw.shape.first().map_or(0, Vec::len))?;
        if raw.visibility.len() != shape.ncols() {
            return Err(Error::DimensionMismatch(
                "visibility mask does not match shape landmark count".into(),
            ));
        }
        Ok(PoseShapeResult {
            rotation: Matrix3::from_fn(|i, j| raw.rotation[i][j]),
            translation: Vector2::new(raw.translation[0], raw.translation[1]),
            coefficients: raw.coefficients,
            shape,
            visibility: raw.visibility,
        })
    }
}

fn check_rotation(rotation: &Matrix3<f64>) -> Result<()> {
    let gram = rotation.transpose() * rotation;
    if (gram - Matrix3::identity()).amax() > 1e-6 || rotation.determinant() < 0.0 {
        return Err(Error::InvalidInput("matrix is not a rotation".into()));
    }
    Ok(())
}

/// Weak-perspective projection `P = c-combined shape rotated and flattened`:
/// top two rows of `rotation` applied to `sum_i c_i B_i`, plus `t` on every
/// column.
pub fn project_weak_perspective(
    basis: &ShapeBasis,
    rotation: &Matrix3<f64>,
    translation: &Vector2<f64>,
    coefficients: &[f64],
) -> Result<Matrix2xX<f64>> {
    check_rotation(rotation)?;
    let shape = basis.combine(coefficients)?;
    let r2 = rotation.fixed_rows::<2>(0).into_owned();
    let mut proj = r2 * shape;
    for mut col in proj.column_iter_mut() {
        col += translation;
    }
    Ok(proj)
}

/// Linearized projection `sum_i T_i B_i + t 1^T` used inside the solver.
pub fn compose_projection(
    motions: &[Motion],
    translation: &Vector2<f64>,
    basis: &ShapeBasis,
) -> Result<Matrix2xX<f64>> {
    if motions.len() != basis.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} motion matrices for {} bases",
            motions.len(),
            basis.k()
        )));
    }
    let mut proj = Matrix2xX::zeros(basis.p());
    for (t_i, b_i) in motions.iter().zip(basis.bases()) {
        proj += t_i * b_i;
    }
    for mut col in proj.column_iter_mut() {
        col += translation;
    }
    Ok(proj)
}

/// Splits a motion matrix into scale and rotation: `c` is the mean of the two
/// singular values and the frame is the nearest matrix with orthonormal rows
/// (the polar factor), completed to a rotation by the cross product of its
/// rows and re-orthonormalized to damp drift.
///
/// A motion assembled from a negative coefficient simply factors as the
/// positive scale times a different rotation: negating both projection rows
/// leaves the cross-product row fixed, and the determinant stays +1.
pub fn factor_motion(motion: &Motion) -> Result<(f64, Matrix3<f64>)> {
    let svd = SVD::new(*motion, true, true);
    let s = svd.singular_values;
    let c = 0.5 * (s[0] + s[1]);
    if c < 1e-12 {
        return Err(Error::DegenerateMotion);
    }
    // Polar factor U V^T: the orthonormal-row frame nearest to motion / c.
    let frame = svd.u.unwrap() * svd.v_t.unwrap();
    let r0 = Vector3::new(frame[(0, 0)], frame[(0, 1)], frame[(0, 2)]);
    let r1 = Vector3::new(frame[(1, 0)], frame[(1, 1)], frame[(1, 2)]);
    let r2 = r0.cross(&r1);
    let rough = Matrix3::from_rows(&[r0.transpose(), r1.transpose(), r2.transpose()]);
    Ok((c, nearest_rotation(&rough)?))
}

/// Nearest rotation in Frobenius norm, with the determinant corrected to +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.ok_or(Error::DegenerateMotion)?;
    let v_t = svd.v_t.ok_or(Error::DegenerateMotion)?;
    let det = (u * v_t).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    Ok(u * fix * v_t)
}

/// Rotation taking the canonical shape onto the camera-frame shape:
/// `argmin_R ||R * canonical - camera||_F` over rotations, after centering
/// both clouds (orthogonal Procrustes).
pub fn align_to_canonical(
    camera: &Matrix3xX<f64>,
    canonical: &Matrix3xX<f64>,
) -> Result<Matrix3<f64>> {
    if camera.ncols() != canonical.ncols() {
        return Err(Error::DimensionMismatch(
            "shape clouds have different landmark counts".into(),
        ));
    }
    let center = |m: &Matrix3xX<f64>| {
        let c = m.column_mean();
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            col -= c;
        }
        out
    };
    let cam = center(camera);
    let can = center(canonical);
    let cross = cam * can.transpose();
    let svd = SVD::new(cross, true, true);
    let s = svd.singular_values;
    // Rank < 2 (collinear landmarks) leaves a whole circle of equally good
    // rotations; refuse rather than pick one arbitrarily.
    if s[1] <= 1e-9 * s[0].max(1e-300) {
        return Err(Error::AlignmentUndefined);
    }
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let det = (u * v_t).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    Ok(u * fix * v_t)
}
