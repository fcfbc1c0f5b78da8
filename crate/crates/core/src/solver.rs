//! The convex localization program and its ADMM solver.
//!
//! Per landmark `j` a detector proposes `l_j` scored locations. The program
//! picks a convex weight vector `x_j` on the simplex per landmark, motion
//! matrices `T_i` (one per basis shape) and a translation `t`, minimizing
//!
//! ```text
//! f_geom + lambda1 * f_score + lambda2 * f_reg
//! f_geom  = 1/2 sum_j || D_j^{-1/2} (L_j^T x_j - [sum_i T_i B_i]_j - t) ||^2
//! f_score = - sum_j r_j^T x_j
//! f_reg   = sum_i sigma_max(T_i)
//! ```
//!
//! The spectral-norm penalty drives each `T_i` toward a scaled rotation so
//! the relaxation stays near the weak-perspective model. ADMM splits `T = Z`
//! and alternates: translation, assignments, motions, auxiliary `Z`
//! (spectral prox), duals `Y`.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Matrix2xX, Vector2, SVD};
use serde::{Deserialize, Serialize};

use crate::geometry::{Motion, ShapeBasis};
use crate::{Error, Result};

/// Scored location hypotheses for one landmark, with the detector's 2D
/// uncertainty covariance.
#[derive(Debug, Clone)]
pub struct LandmarkHypotheses {
    pub id: usize,
    /// 2 x l, one column per hypothesis.
    locations: Matrix2xX<f64>,
    scores: DVector<f64>,
    covariance: Matrix2<f64>,
    cov_inv: Matrix2<f64>,
}

impl LandmarkHypotheses {
    pub fn new(
        id: usize,
        locations: Matrix2xX<f64>,
        scores: DVector<f64>,
        covariance: Matrix2<f64>,
    ) -> Result<Self> {
        let l = locations.ncols();
        if l == 0 {
            return Err(Error::InvalidInput(format!(
                "landmark {id} has no hypotheses"
            )));
        }
        if scores.len() != l {
            return Err(Error::DimensionMismatch(format!(
                "landmark {id}: {l} locations, {} scores",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite())
            || locations.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "landmark {id} has non-finite hypothesis data"
            )));
        }
        let cov_inv = spd_inverse(&covariance)?;
        Ok(Self { id, locations, scores, covariance, cov_inv })
    }

    pub fn len(&self) -> usize {
        self.locations.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false // l >= 1 by construction
    }

    pub fn locations(&self) -> &Matrix2xX<f64> {
        &self.locations
    }

    pub fn location(&self, h: usize) -> Vector2<f64> {
        self.locations.column(h).into_owned()
    }

    pub fn scores(&self) -> &DVector<f64> {
        &self.scores
    }

    pub fn covariance(&self) -> &Matrix2<f64> {
        &self.covariance
    }

    pub(crate) fn cov_inv(&self) -> &Matrix2<f64> {
        &self.cov_inv
    }

    /// Index of the best-scoring hypothesis (lowest index on ties).
    pub fn top_hypothesis(&self) -> usize {
        let mut best = 0;
        for h in 1..self.len() {
            if self.scores[h] > self.scores[best] {
                best = h;
            }
        }
        best
    }

    /// Copy with only the hypotheses in `keep` (in the given order).
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::InvalidInput(format!(
                "landmark {}: hypothesis subset is empty",
                self.id
            )));
        }
        let locations = Matrix2xX::from_columns(
            &keep.iter().map(|&h| self.locations.column(h).into_owned()).collect::<Vec<_>>(),
        );
        let scores = DVector::from_iterator(keep.len(), keep.iter().map(|&h| self.scores[h]));
        Self::new(self.id, locations, scores, self.covariance)
    }
}

fn spd_inverse(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-9 * (1.0 + m.amax()) {
        return Err(Error::CovarianceNotSpd);
    }
    Cholesky::new(*m)
        .map(|ch| ch.inverse())
        .ok_or(Error::CovarianceNotSpd)
}

/// All landmark hypothesis lists for one instance, ordered by landmark id
/// `0..p`.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    landmarks: Vec<LandmarkHypotheses>,
}

impl HypothesisSet {
    /// Landmarks are sorted by id; ids must be exactly `0..p`.
    pub fn new(mut landmarks: Vec<LandmarkHypotheses>) -> Result<Self> {
        landmarks.sort_by_key(|lm| lm.id);
        for (j, lm) in landmarks.iter().enumerate() {
            if lm.id != j {
                return Err(Error::InvalidInput(format!(
                    "landmark ids must cover 0..p exactly, found id {} at position {j}",
                    lm.id
                )));
            }
        }
        if landmarks.is_empty() {
            return Err(Error::InvalidInput("no landmarks".into()));
        }
        Ok(Self { landmarks })
    }

    pub fn p(&self) -> usize {
        self.landmarks.len()
    }

    pub fn landmarks(&self) -> &[LandmarkHypotheses] {
        &self.landmarks
    }

    pub fn landmark(&self, j: usize) -> &LandmarkHypotheses {
        &self.landmarks[j]
    }

    /// Subset of landmarks where `mask` is true, re-numbered to `0..n`. The
    /// returned map gives the original id per new position.
    pub fn restrict(&self, mask: &[bool]) -> Result<(HypothesisSet, Vec<usize>)> {
        if mask.len() != self.p() {
            return Err(Error::DimensionMismatch(
                "visibility mask does not match landmark count".into(),
            ));
        }
        let kept: Vec<usize> = (0..self.p()).filter(|&j| mask[j]).collect();
        if kept.is_empty() {
            return Err(Error::EmptyMask);
        }
        let landmarks = kept
            .iter()
            .enumerate()
            .map(|(new_id, &j)| {
                let mut lm = self.landmarks[j].clone();
                lm.id = new_id;
                lm
            })
            .collect();
        Ok((Self { landmarks }, kept))
    }

    pub fn to_json(&self) -> String {
        let raw: Vec<RawLandmark> = self
            .landmarks
            .iter()
            .map(|lm| RawLandmark {
                id: lm.id,
                hyps: (0..lm.len())
                    .map(|h| RawHyp {
                        x: lm.locations[(0, h)],
                        y: lm.locations[(1, h)],
                        score: lm.scores[h],
                    })
                    .collect(),
                cov: [
                    [lm.covariance[(0, 0)], lm.covariance[(0, 1)]],
                    [lm.covariance[(1, 0)], lm.covariance[(1, 1)]],
                ],
            })
            .collect();
        serde_json::to_string_pretty(&raw).expect("hypothesis serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Vec<RawLandmark> = serde_json::from_str(text)?;
        let landmarks = raw
            .into_iter()
            .map(|lm| {
                let l = lm.hyps.len().max(1);
                let mut locations = Matrix2xX::zeros(l);
                let mut scores = DVector::zeros(l);
                if lm.hyps.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "landmark {} has no hypotheses",
                        lm.id
                    )));
                }
                for (h, hyp) in lm.hyps.iter().enumerate() {
                    locations[(0, h)] = hyp.x;
                    locations[(1, h)] = hyp.y;
                    scores[h] = hyp.score;
                }
                let cov = Matrix2::new(lm.cov[0][0], lm.cov[0][1], lm.cov[1][0], lm.cov[1][1]);
                LandmarkHypotheses::new(lm.id, locations, scores, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(landmarks)
    }
}

#[derive(Serialize, Deserialize)]
struct RawHyp {
    x: f64,
    y: f64,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct RawLandmark {
    id: usize,
    hyps: Vec<RawHyp>,
    cov: [[f64; 2]; 2],
}

/// Solver variables: motions, translation, simplex assignments, plus the
/// ADMM auxiliary copy `Z` and duals `Y`.
#[derive(Debug, Clone)]
pub struct MotionState {
    pub motions: Vec<Motion>,
    pub translation: Vector2<f64>,
    pub assignments: Vec<DVector<f64>>,
    pub aux: Vec<Motion>,
    pub duals: Vec<Motion>,
}

/// Solver parameters. `eps_primal`/`eps_dual` default to `1e-6 * sqrt(6k)`
/// when left unset, scaling the tolerance with the number of motion entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    pub max_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_primal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_dual: Option<f64>,
    /// Residual balancing: double or halve rho when one residual exceeds the
    /// other by 10x. Off by default.
    pub adapt_rho: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda1: 1000.0,
            lambda2: 50.0,
            rho: 1.0,
            max_iters: 2000,
            eps_primal: None,
            eps_dual: None,
            adapt_rho: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be >= 0".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config("rho must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        for (name, eps) in [("eps_primal", self.eps_primal), ("eps_dual", self.eps_dual)] {
            if let Some(e) = eps {
                if !(e > 0.0) {
                    return Err(Error::Config(format!("{name} must be > 0")));
                }
            }
        }
        Ok(())
    }

    pub fn eps_primal_for(&self, k: usize) -> f64 {
        self.eps_primal.unwrap_or(1e-6 * ((6 * k) as f64).sqrt())
    }

    pub fn eps_dual_for(&self, k: usize) -> f64 {
        self.eps_dual.unwrap_or(1e-6 * ((6 * k) as f64).sqrt())
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationStats {
    pub iter: usize,
    pub objective: f64,
    pub primal_res: f64,
    pub dual_res: f64,
}

/// Writes the diagnostics trace as `iter,objective,primal_res,dual_res`.
pub fn write_trace_csv<W: std::io::Write>(trace: &[IterationStats], out: &mut W) -> Result<()> {
    writeln!(out, "iter,objective,primal_res,dual_res")?;
    for s in trace {
        writeln!(out, "{},{},{},{}", s.iter, s.objective, s.primal_res, s.dual_res)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub state: MotionState,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    /// True if the motion normal matrix needed a ridge bump (degenerate
    /// basis geometry).
    pub ridge_warning: bool,
    pub trace: Vec<IterationStats>,
}

/// Geometric data term: Mahalanobis-whitened residual between the assigned
/// hypothesis location and the model projection, per landmark.
pub fn eval_geom(state: &MotionState, hyps: &HypothesisSet, basis: &ShapeBasis) -> f64 {
    let proj = projection_columns(&state.motions, basis);
    let mut total = 0.0;
    for (j, lm) in hyps.landmarks().iter().enumerate() {
        let r = lm.locations() * &state.assignments[j] - proj.column(j) - state.translation;
        total += 0.5 * (r.transpose() * lm.cov_inv() * r)[(0, 0)];
    }
    total
}

/// Score term `- sum_j r_j^T x_j`: rewards keeping assignment mass on
/// high-scoring hypotheses.
pub fn eval_score(state: &MotionState, hyps: &HypothesisSet) -> f64 {
    let mut total = 0.0;
    for (j, lm) in hyps.landmarks().iter().enumerate() {
        total -= lm.scores().dot(&state.assignments[j]);
    }
    total
}

/// Spectral-norm penalty `sum_i sigma_max(T_i)`.
pub fn eval_reg(motions: &[Motion]) -> f64 {
    motions.iter().map(|t| singular_values_2x3(t).0).sum()
}

/// Full objective at the state's primal variables (`T`, not `Z`).
pub fn eval_objective(
    state: &MotionState,
    hyps: &HypothesisSet,
    basis: &ShapeBasis,
    config: &SolverConfig,
) -> f64 {
    eval_geom(state, hyps, basis)
        + config.lambda1 * eval_score(state, hyps)
        + config.lambda2 * eval_reg(&state.motions)
}

/// Analytic gradients of `f_geom` with respect to translation, motions and
/// assignments.
pub fn grad_geom(
    state: &MotionState,
    hyps: &HypothesisSet,
    basis: &ShapeBasis,
) -> (Vector2<f64>, Vec<Motion>, Vec<DVector<f64>>) {
    let proj = projection_columns(&state.motions, basis);
    let mut g_t = Vector2::zeros();
    let mut g_motions = vec![Motion::zeros(); basis.k()];
    let mut g_x = Vec::with_capacity(hyps.p());
    for (j, lm) in hyps.landmarks().iter().enumerate() {
        let r = lm.locations() * &state.assignments[j] - proj.column(j) - state.translation;
        let wr = lm.cov_inv() * r;
        g_t -= wr;
        for (i, b) in basis.bases().iter().enumerate() {
            let b_j = b.column(j);
            g_motions[i] -= wr * b_j.transpose();
        }
        g_x.push(lm.locations().transpose() * wr);
    }
    (g_t, g_motions, g_x)
}

/// `sum_i T_i B_i` without the translation.
fn projection_columns(motions: &[Motion], basis: &ShapeBasis) -> Matrix2xX<f64> {
    let mut proj = Matrix2xX::zeros(basis.p());
    for (t_i, b_i) in motions.iter().zip(basis.bases()) {
        proj += t_i * b_i;
    }
    proj
}

/// Singular values of a 2x3 matrix, descending. Computed from the 2x2 Gram
/// matrix eigenvalues in closed form.
pub fn singular_values_2x3(m: &Motion) -> (f64, f64) {
    let g = m * m.transpose();
    let tr = g[(0, 0)] + g[(1, 1)];
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let l1 = (0.5 * tr + disc).max(0.0);
    let l2 = (0.5 * tr - disc).max(0.0);
    (l1.sqrt(), l2.sqrt())
}

/// Proximal operator of `mu * sigma_max`: `argmin_Z 1/2 ||Z - A||_F^2 +
/// mu * sigma_max(Z)`.
///
/// By Moreau decomposition this is `A` minus the projection of `A` onto the
/// nuclear-norm ball of radius `mu`, which in turn projects the singular
/// value pair onto the l1 ball. The penalty first shrinks the leading
/// singular value toward the trailing one, then both together; for
/// `||A||_* <= mu` the result is exactly zero.
pub fn prox_spectral(a: &Motion, mu: f64) -> Motion {
    if mu <= 0.0 || !mu.is_finite() {
        // Zero penalty is exactly the identity; skip the SVD round-trip.
        // Negative or non-finite mu is a contract violation, same no-op.
        return *a;
    }
    let svd = SVD::new(*a, true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut pairs = [(svd.singular_values[0], 0usize), (svd.singular_values[1], 1usize)];
    if pairs[0].0 < pairs[1].0 {
        pairs.swap(0, 1);
    }
    let (s1, i1) = pairs[0];
    let (s2, i2) = pairs[1];
    // Projection of (s1, s2) onto the l1 ball of radius mu.
    let (p1, p2) = if s1 + s2 <= mu {
        (s1, s2)
    } else if s1 - s2 <= mu {
        let theta = 0.5 * (s1 + s2 - mu);
        (s1 - theta, s2 - theta)
    } else {
        (mu, 0.0)
    };
    let shrunk = [(i1, s1 - p1), (i2, s2 - p2)];
    let mut out = Motion::zeros();
    for (idx, s) in shrunk {
        let ui = u.column(idx).into_owned();
        let vi = v_t.row(idx).into_owned();
        out += ui * vi * s;
    }
    out
}

/// Caches that stay fixed over ADMM iterations for a given problem.
struct SolveWorkspace {
    /// Per-landmark Q_j = L_j W_j L_j^T and its Lipschitz bound.
    q: Vec<DMatrix<f64>>,
    lipschitz: Vec<f64>,
    /// Per-landmark M^T W (l x 2) for the linear term.
    mtw: Vec<nalgebra::MatrixXx2<f64>>,
    /// Stacked basis columns beta_j in R^{3k}.
    beta: Vec<DVector<f64>>,
    /// Cholesky of H = sum_j beta_j beta_j^T (x) W_j + rho I.
    motion_chol: Cholesky<f64, nalgebra::Dyn>,
    h_base: DMatrix<f64>,
    ridge_warning: bool,
}

impl SolveWorkspace {
    fn build(hyps: &HypothesisSet, basis: &ShapeBasis, rho: f64) -> Result<Self> {
        let p = basis.p();
        let k = basis.k();
        let mut q = Vec::with_capacity(p);
        let mut lipschitz = Vec::with_capacity(p);
        let mut mtw = Vec::with_capacity(p);
        let mut beta = Vec::with_capacity(p);
        for (j, lm) in hyps.landmarks().iter().enumerate() {
            let w = *lm.cov_inv();
            let m = lm.locations();
            let mtw_j = m.transpose() * w;
            let q_j = &mtw_j * m;
            lipschitz.push(spectral_bound(&q_j));
            q.push(q_j);
            mtw.push(mtw_j);
            let mut b = DVector::zeros(3 * k);
            for (i, bs) in basis.bases().iter().enumerate() {
                for r in 0..3 {
                    b[3 * i + r] = bs[(r, j)];
                }
            }
            beta.push(b);
        }
        let (h_base, motion_chol, ridge_warning) = motion_normal_chol(hyps, &beta, k, rho)?;
        Ok(Self { q, lipschitz, mtw, beta, motion_chol, h_base, ridge_warning })
    }

    fn refresh_rho(&mut self, rho: f64) {
        let n = self.h_base.nrows();
        let mut h = self.h_base.clone();
        for i in 0..n {
            h[(i, i)] += rho;
        }
        // h_base is PSD, so adding rho > 0 keeps this factorizable.
        self.motion_chol = Cholesky::new(h).expect("rho-shifted normal matrix is SPD");
    }
}

/// Builds H = sum_j (beta_j beta_j^T kron W_j) + rho I and its Cholesky.
/// Column-major vec ordering of the 2 x 3k motion block: index = 2*col + row.
fn motion_normal_chol(
    hyps: &HypothesisSet,
    beta: &[DVector<f64>],
    k: usize,
    rho: f64,
) -> Result<(DMatrix<f64>, Cholesky<f64, nalgebra::Dyn>, bool)> {
    let n = 6 * k;
    let mut h = DMatrix::zeros(n, n);
    for (j, lm) in hyps.landmarks().iter().enumerate() {
        let w = lm.cov_inv();
        let b = &beta[j];
        for ca in 0..3 * k {
            if b[ca] == 0.0 {
                continue;
            }
            for cb in 0..3 * k {
                let bb = b[ca] * b[cb];
                if bb == 0.0 {
                    continue;
                }
                for ra in 0..2 {
                    for rb in 0..2 {
                        h[(2 * ca + ra, 2 * cb + rb)] += bb * w[(ra, rb)];
                    }
                }
            }
        }
    }
    let h_base = h.clone();
    for i in 0..n {
        h[(i, i)] += rho;
    }
    match Cholesky::new(h.clone()) {
        Some(ch) => Ok((h_base, ch, false)),
        None => {
            // Degenerate basis geometry; a tiny ridge restores definiteness.
            for i in 0..n {
                h[(i, i)] += 1e-9;
            }
            let ch = Cholesky::new(h).ok_or_else(|| {
                Error::InvalidInput("motion normal matrix is not positive definite".into())
            })?;
            Ok((h_base, ch, true))
        }
    }
}

/// Frobenius norm bounds the spectral norm; good enough as a FISTA step
/// bound for these tiny matrices.
fn spectral_bound(q: &DMatrix<f64>) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
}

/// Exact translation update: precision-weighted mean of the residuals
/// between assigned locations and the motion projection.
pub fn update_translation(
    state: &MotionState,
    hyps: &HypothesisSet,
    basis: &ShapeBasis,
) -> Vector2<f64> {
    let proj = projection_columns(&state.motions, basis);
    let mut w_sum = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for (j, lm) in hyps.landmarks().iter().enumerate() {
        let w = lm.cov_inv();
        w_sum += w;
        rhs += w * (lm.locations() * &state.assignments[j] - proj.column(j));
    }
    // w_sum is SPD because every D_j is.
    Cholesky::new(w_sum).expect("sum of SPD matrices").solve(&rhs)
}

/// Exact per-landmark assignment update: minimizes the landmark's quadratic
/// geometry cost minus `lambda1` times its score, over the simplex.
///
/// Solved by accelerated projected gradient to a fixed-point residual below
/// 1e-9; hypotheses with bitwise-identical location and score share their
/// mass uniformly afterward so ties resolve deterministically.
pub fn update_assignments(
    state: &MotionState,
    hyps: &HypothesisSet,
    basis: &ShapeBasis,
    lambda1: f64,
) -> Vec<DVector<f64>> {
    let ws = SolveWorkspace::build(hyps, basis, 1.0).expect("validated inputs");
    update_assignments_ws(state, hyps, basis, lambda1, &ws)
}

fn update_assignments_ws(
    state: &MotionState,
    hyps: &HypothesisSet,
    basis: &ShapeBasis,
    lambda1: f64,
    ws: &SolveWorkspace,
) -> Vec<DVector<f64>> {
    let proj = projection_columns(&state.motions, basis);
    let mut out = Vec::with_capacity(hyps.p());
    for (j, lm) in hyps.landmarks().iter().enumerate() {
        let l = lm.len();
        if l == 1 {
            out.push(DVector::from_element(1, 1.0));
            continue;
        }
        let target = proj.column(j) + state.translation;
        let lin = &ws.mtw[j] * target + lm.scores() * lambda1;
        let x = simplex_qp(&ws.q[j], &lin, ws.lipschitz[j], &state.assignments[j]);
        out.push(spread_ties(lm, x));
    }
    out
}

/// Minimizes `1/2 x^T Q x - lin^T x` over the probability simplex with FISTA.
fn simplex_qp(q: &DMatrix<f64>, lin: &DVector<f64>, lipschitz: f64, warm: &DVector<f64>) -> DVector<f64> {
    let step = 1.0 / lipschitz;
    let mut x = project_simplex(warm);
    let mut x_prev = x.clone();
    let mut t_acc = 1.0f64;
    for _ in 0..10_000 {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
        let momentum = (t_acc - 1.0) / t_next;
        let y = &x + (&x - &x_prev) * momentum;
        let grad_y = q * &y - lin;
        let x_new = project_simplex(&(y - grad_y * step));
        // Fixed-point residual at the new iterate decides convergence.
        let grad_new = q * &x_new - lin;
        let fp = project_simplex(&(&x_new - &grad_new * step));
        let res = (&fp - &x_new).amax();
        x_prev = x;
        x = x_new;
        t_acc = t_next;
        if res <= 1e-10 * (1.0 + lipschitz * step) {
            break;
        }
    }
    x
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    let mut found = false;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
            found = true;
        } else {
            break;
        }
    }
    if !found {
        // All mass collapses to the largest coordinate.
        theta = (v.iter().copied().fold(f64::NEG_INFINITY, f64::max) * n as f64 - 1.0) / n as f64;
    }
    DVector::from_iterator(n, v.iter().map(|&x| (x - theta).max(0.0)))
}

/// Duplicate hypotheses (bitwise-equal location and score) are
/// indistinguishable to the objective; share their mass uniformly so the
/// minimizer reported is the symmetric one.
fn spread_ties(lm: &LandmarkHypotheses, mut x: DVector<f64>) -> DVector<f64> {
    let l = lm.len();
    let mut handled = vec![false; l];
    for a in 0..l {
        if handled[a] {
            continue;
        }
        let mut group = vec![a];
        for b in a + 1..l {
            if !handled[b]
                && lm.locations[(0, a)] == lm.locations[(0, b)]
                && lm.locations[(1, a)] == lm.locations[(1, b)]
                && lm.scores[a] == lm.scores[b]
            {
                group.push(b);
                handled[b] = true;
            }
        }
        if group.len() > 1 {
            let mass: f64 = group.iter().map(|&i| x[i]).sum();
            for &i in &group {
                x[i] = mass / group.len() as f64;
            }
        }
    }
    x
}

/// Joint motion update: minimizes `f_geom + <Y, T - Z> + rho/2 ||T - Z||^2`
/// over all motion matrices at once via the cached normal-matrix Cholesky.
pub fn update_motions(
    state: &MotionState,
    hyps: &HypothesisSet,
    basis: &ShapeBasis,
    rho: f64,
) -> Result<Vec<Motion>> {
    let ws = SolveWorkspace::build(hyps, basis, rho)?;
    Ok(update_motions_ws(state, hyps, basis, rho, &ws))
}

fn update_motions_ws(
    state: &MotionState,
    hyps: &HypothesisSet,
    basis: &ShapeBasis,
    rho: f64,
    ws: &SolveWorkspace,
) -> Vec<Motion> {
    let k = basis.k();
    let mut rhs = DVector::zeros(6 * k);
    for (j, lm) in hyps.landmarks().iter().enumerate() {
        let u = lm.locations() * &state.assignments[j] - state.translation;
        let wu = lm.cov_inv() * u;
        let b = &ws.beta[j];
        for c in 0..3 * k {
            if b[c] != 0.0 {
                rhs[2 * c] += wu[0] * b[c];
                rhs[2 * c + 1] += wu[1] * b[c];
            }
        }
    }
    for i in 0..k {
        let z = &state.aux[i];
        let y = &state.duals[i];
        for col in 0..3 {
            for row in 0..2 {
                rhs[2 * (3 * i + col) + row] += rho * z[(row, col)] - y[(row, col)];
            }
        }
    }
    let sol = ws.motion_chol.solve(&rhs);
    (0..k)
        .map(|i| {
            Motion::from_fn(|row, col| sol[2 * (3 * i + col) + row])
        })
        .collect()
}

fn initial_state(hyps: &HypothesisSet, basis: &ShapeBasis) -> MotionState {
    let k = basis.k();
    let assignments = hyps
        .landmarks()
        .iter()
        .map(|lm| {
            let max = lm.scores().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut x = DVector::from_iterator(lm.len(), lm.scores().iter().map(|s| (s - max).exp()));
            let sum: f64 = x.iter().sum();
            x /= sum;
            x
        })
        .collect();
    // Precision-weighted mean of each landmark's best-scoring location.
    let mut w_sum = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for lm in hyps.landmarks() {
        let w = lm.cov_inv();
        w_sum += w;
        rhs += w * lm.location(lm.top_hypothesis());
    }
    let translation = Cholesky::new(w_sum)
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(Vector2::zeros);
    MotionState {
        motions: vec![Motion::zeros(); k],
        translation,
        assignments,
        aux: vec![Motion::zeros(); k],
        duals: vec![Motion::zeros(); k],
    }
}

/// Runs ADMM to the requested tolerances. Non-convergence within
/// `max_iters` is reported through the `converged` flag, not an error.
pub fn solve(hyps: &HypothesisSet, basis: &ShapeBasis, config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    if hyps.p() != basis.p() {
        return Err(Error::DimensionMismatch(format!(
            "{} hypothesis landmarks vs {} basis landmarks",
            hyps.p(),
            basis.p()
        )));
    }
    let k = basis.k();
    let eps_primal = config.eps_primal_for(k);
    let eps_dual = config.eps_dual_for(k);
    let mut rho = config.rho;
    let mut ws = SolveWorkspace::build(hyps, basis, rho)?;
    let mut state = initial_state(hyps, basis);
    let mut trace = Vec::with_capacity(config.max_iters.min(4096));
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=config.max_iters {
        iterations = iter;
        state.translation = update_translation(&state, hyps, basis);
        state.assignments = update_assignments_ws(&state, hyps, basis, config.lambda1, &ws);
        state.motions = update_motions_ws(&state, hyps, basis, rho, &ws);

        let mu = config.lambda2 / rho;
        let mut primal_sq = 0.0;
        let mut dual_sq = 0.0;
        for i in 0..k {
            let target = state.motions[i] + state.duals[i] / rho;
            let z_new = prox_spectral(&target, mu);
            dual_sq += (z_new - state.aux[i]).norm_squared();
            state.aux[i] = z_new;
            let gap = state.motions[i] - state.aux[i];
            primal_sq += gap.norm_squared();
            state.duals[i] += gap * rho;
        }
        let primal_res = primal_sq.sqrt();
        let dual_res = rho * dual_sq.sqrt();
        let objective = eval_objective(&state, hyps, basis, config);
        trace.push(IterationStats { iter, objective, primal_res, dual_res });

        if primal_res <= eps_primal && dual_res <= eps_dual {
            converged = true;
            break;
        }
        if config.adapt_rho && iter % 10 == 0 {
            if primal_res > 10.0 * dual_res {
                rho *= 2.0;
                ws.refresh_rho(rho);
            } else if dual_res > 10.0 * primal_res {
                rho *= 0.5;
                ws.refresh_rho(rho);
            }
        }
    }

    let objective = eval_objective(&state, hyps, basis, config);
    Ok(SolveResult {
        state,
        converged,
        iterations,
        objective,
        ridge_warning: ws.ridge_warning,
        trace,
    })
}
