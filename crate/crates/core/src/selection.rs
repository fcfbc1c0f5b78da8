//! Landmark subset selection as uncapacitated facility location, plus the
//! average-precision score that feeds it.
//!
//! Every landmark is both a facility and a demand. Opening landmark `v`
//! costs its detection unreliability `z_v = 1 - AP_v`; serving demand `u`
//! from `v` costs `lambda` times their mean 3D distance over the training
//! shapes, so unreliable landmarks lean on reliable nearby ones. The binary
//! program is relaxed to an LP, solved exactly with the simplex code in
//! [`crate::lp`], then thresholded and greedily repaired.

use nalgebra::{DMatrix, Matrix3xX, Vector2};
use serde::{Deserialize, Serialize};

use crate::lp::LpProblem;
use crate::{Error, Result};

/// Facility-location costs: `n` landmarks, unary opening costs, pairwise
/// service distances, and the trade-off weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct FacilityInstance {
    pub n: usize,
    pub unary: Vec<f64>,
    pub pairwise: DMatrix<f64>,
    pub lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    n: usize,
    unary: Vec<f64>,
    pairwise: Vec<Vec<f64>>,
    lambda: f64,
}

impl From<FacilityInstance> for RawInstance {
    fn from(inst: FacilityInstance) -> Self {
        RawInstance {
            n: inst.n,
            unary: inst.unary,
            pairwise: (0..inst.pairwise.nrows())
                .map(|r| inst.pairwise.row(r).iter().copied().collect())
                .collect(),
            lambda: inst.lambda,
        }
    }
}

impl TryFrom<RawInstance> for FacilityInstance {
    type Error = Error;

    fn try_from(raw: RawInstance) -> Result<Self> {
        if raw.pairwise.len() != raw.n || raw.pairwise.iter().any(|r| r.len() != raw.n) {
            return Err(Error::DimensionMismatch("pairwise matrix must be n x n".into()));
        }
        let pairwise = DMatrix::from_fn(raw.n, raw.n, |r, c| raw.pairwise[r][c]);
        FacilityInstance::new(raw.unary, pairwise, raw.lambda)
    }
}

impl FacilityInstance {
    pub fn new(unary: Vec<f64>, pairwise: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let n = unary.len();
        if n == 0 {
            return Err(Error::InvalidInput("no landmarks to select from".into()));
        }
        if pairwise.nrows() != n || pairwise.ncols() != n {
            return Err(Error::DimensionMismatch("pairwise matrix must be n x n".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        for u in 0..n {
            if pairwise[(u, u)].abs() > 1e-12 {
                return Err(Error::InvalidInput("pairwise diagonal must be zero".into()));
            }
            for v in 0..n {
                let d = pairwise[(u, v)];
                // Coincident landmarks (d = 0 off-diagonal) are allowed.
                if !(d >= 0.0) {
                    return Err(Error::InvalidInput("pairwise distances must be >= 0".into()));
                }
                if (d - pairwise[(v, u)]).abs() > 1e-9 * (1.0 + d.abs()) {
                    return Err(Error::InvalidInput("pairwise distances must be symmetric".into()));
                }
            }
        }
        Ok(Self { n, unary, pairwise, lambda })
    }

    /// Objective of an integral selection: opening costs plus `lambda` times
    /// each demand's distance to its nearest open facility.
    pub fn integral_objective(&self, selected: &[bool]) -> Option<f64> {
        let mut total: f64 = (0..self.n).filter(|&v| selected[v]).map(|v| self.unary[v]).sum();
        for u in 0..self.n {
            let nearest = self.nearest_selected(u, selected)?;
            total += self.lambda * self.pairwise[(u, nearest)];
        }
        Some(total)
    }

    fn nearest_selected(&self, u: usize, selected: &[bool]) -> Option<usize> {
        let mut best: Option<usize> = None;
        for v in 0..self.n {
            if selected[v] {
                let better = match best {
                    None => true,
                    Some(b) => self.pairwise[(u, v)] < self.pairwise[(u, b)],
                };
                if better {
                    best = Some(v);
                }
            }
        }
        best
    }
}

/// Unary costs from per-landmark AP, pairwise costs from mean 3D landmark
/// distances over the given training shapes.
pub fn build_instance(
    aps: &[f64],
    shapes: &[Matrix3xX<f64>],
    lambda: f64,
) -> Result<FacilityInstance> {
    let n = aps.len();
    if shapes.is_empty() {
        return Err(Error::InvalidInput("need at least one training shape".into()));
    }
    for ap in aps {
        if !(0.0..=1.0).contains(ap) {
            return Err(Error::InvalidInput(format!("AP {ap} outside [0, 1]")));
        }
    }
    for s in shapes {
        if s.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "shape has {} landmarks, AP list has {n}",
                s.ncols()
            )));
        }
    }
    let unary: Vec<f64> = aps.iter().map(|ap| 1.0 - ap).collect();
    let mut pairwise = DMatrix::zeros(n, n);
    for u in 0..n {
        for v in u + 1..n {
            let d: f64 = shapes
                .iter()
                .map(|s| (s.column(u) - s.column(v)).norm())
                .sum::<f64>()
                / shapes.len() as f64;
            pairwise[(u, v)] = d;
            pairwise[(v, u)] = d;
        }
    }
    FacilityInstance::new(unary, pairwise, lambda)
}

/// Raw LP optimum before thresholding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionalSolution {
    pub y: Vec<f64>,
    /// Row u, column v: fraction of demand u served by facility v.
    pub x: Vec<Vec<f64>>,
    pub objective: f64,
    pub duality_gap: f64,
}

/// Solves the LP relaxation exactly.
///
/// Variables `y_v` (open) and `x_uv` (serve u from v) in `[0, 1]`;
/// constraints `sum_v x_uv = 1` and `x_uv <= y_v`.
pub fn solve_lp_relaxation(inst: &FacilityInstance) -> Result<FractionalSolution> {
    let n = inst.n;
    // Rows: 0..n demand equalities, then n + u*n + v for x_uv - y_v + s = 0.
    let rows = n + n * n;
    let mut rhs = vec![0.0; rows];
    for r in 0..n {
        rhs[r] = 1.0;
    }
    let mut lp = LpProblem::new(rows, rhs)?;
    // y_v first (indices 0..n), then x_uv (n + u*n + v), then slacks.
    for v in 0..n {
        let col: Vec<(usize, f64)> = (0..n).map(|u| (n + u * n + v, -1.0)).collect();
        lp.add_variable(inst.unary[v], 1.0, &col)?;
    }
    for u in 0..n {
        for v in 0..n {
            lp.add_variable(
                inst.lambda * inst.pairwise[(u, v)],
                1.0,
                &[(u, 1.0), (n + u * n + v, 1.0)],
            )?;
        }
    }
    for u in 0..n {
        for v in 0..n {
            lp.add_variable(0.0, f64::INFINITY, &[(n + u * n + v, 1.0)])?;
        }
    }
    let sol = lp.solve()?;
    let y = sol.x[0..n].to_vec();
    let x = (0..n)
        .map(|u| (0..n).map(|v| sol.x[n + u * n + v]).collect())
        .collect();
    Ok(FractionalSolution { y, x, objective: sol.objective, duality_gap: sol.duality_gap })
}

/// Thresholded and repaired integral selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<bool>,
    /// Serving facility per demand.
    pub assignment: Vec<usize>,
    pub objective: f64,
}

/// Opens every facility with `y_v >= tau` (inclusive), then greedily opens
/// whatever facility lowers the objective most until every demand is served.
/// With a complete distance matrix the repair loop runs at most once, when
/// the threshold opened nothing.
pub fn threshold_and_repair(
    fractional: &FractionalSolution,
    inst: &FacilityInstance,
    tau: f64,
) -> Result<SelectionResult> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    if fractional.y.len() != inst.n {
        return Err(Error::DimensionMismatch("fractional solution size mismatch".into()));
    }
    let mut selected: Vec<bool> = fractional.y.iter().map(|&y| y >= tau).collect();
    while !selected.iter().any(|&s| s) {
        // Nothing open: every candidate serves all demands; open the one
        // with the lowest resulting objective (lowest index on ties).
        let mut best: Option<(usize, f64)> = None;
        for v in 0..inst.n {
            let mut trial = selected.clone();
            trial[v] = true;
            let obj = inst.integral_objective(&trial).expect("one facility serves all");
            if best.map_or(true, |(_, b)| obj < b) {
                best = Some((v, obj));
            }
        }
        selected[best.expect("n >= 1").0] = true;
    }
    let assignment: Vec<usize> = (0..inst.n)
        .map(|u| inst.nearest_selected(u, &selected).expect("at least one open"))
        .collect();
    let objective = inst.integral_objective(&selected).expect("repaired");
    Ok(SelectionResult { selected, assignment, objective })
}

/// A scored 2D detection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Detection {
    pub fn location(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Standard average precision with all-points interpolation.
///
/// Detections across images are ranked by score (descending, stable); a
/// detection is a true positive when it lands within `radius` of a
/// still-unmatched ground-truth point in its image, matching the nearest
/// such point. AP is the area under the precision envelope.
pub fn compute_ap(
    detections: &[Vec<Detection>],
    truths: &[Vec<Vector2<f64>>],
    radius: f64,
) -> Result<f64> {
    if detections.len() != truths.len() {
        return Err(Error::DimensionMismatch(
            "detection and truth image counts differ".into(),
        ));
    }
    let total_gt: usize = truths.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        for d in 0..dets.len() {
            ranked.push((img, d));
        }
    }
    ranked.sort_by(|a, b| {
        let sa = detections[a.0][a.1].score;
        let sb = detections[b.0][b.1].score;
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut matched: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let mut is_tp = Vec::with_capacity(ranked.len());
    for &(img, d) in &ranked {
        let loc = detections[img][d].location();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in truths[img].iter().enumerate() {
            if matched[img][g] {
                continue;
            }
            let dist = (loc - gt).norm();
            if dist <= radius && best.map_or(true, |(_, bd)| dist < bd) {
                best = Some((g, dist));
            }
        }
        match best {
            Some((g, _)) => {
                matched[img][g] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }

    // Precision envelope, integrated over recall.
    let mut precisions = Vec::with_capacity(is_tp.len());
    let mut recalls = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (i, &t) in is_tp.iter().enumerate() {
        if t {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    Ok(ap)
}
