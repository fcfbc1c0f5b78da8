//! Dense revised simplex for small linear programs.
//!
//! Solves `min c^T x` subject to `A x = b`, `0 <= x <= u` (upper bounds may
//! be infinite). Two phases with artificial variables, explicit basis
//! inverse updated per pivot, and Bland's rule throughout so cycling cannot
//! occur. Sized for the facility-location relaxation, whose variable count
//! is quadratic in the landmark count: fine up to a few hundred landmarks,
//! not a general-purpose LP code.

use nalgebra::DMatrix;

use crate::{Error, Result};

const TOL: f64 = 1e-9;

/// Equality-form LP with box bounds. Columns are stored sparse since every
/// facility-location column has at most `n + 1` entries.
#[derive(Debug, Clone)]
pub struct LpProblem {
    rows: usize,
    cost: Vec<f64>,
    cols: Vec<Vec<(usize, f64)>>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// |primal - dual| at termination, relative to 1 + |objective|.
    pub duality_gap: f64,
    pub iterations: usize,
}

impl LpProblem {
    pub fn new(rows: usize, rhs: Vec<f64>) -> Result<Self> {
        if rhs.len() != rows {
            return Err(Error::DimensionMismatch("rhs length != row count".into()));
        }
        Ok(Self { rows, cost: Vec::new(), cols: Vec::new(), upper: Vec::new(), rhs })
    }

    /// Adds a variable with lower bound 0; returns its index.
    pub fn add_variable(&mut self, cost: f64, upper: f64, column: &[(usize, f64)]) -> Result<usize> {
        if upper < 0.0 || upper.is_nan() {
            return Err(Error::Config("variable upper bound must be >= 0".into()));
        }
        for &(r, v) in column {
            if r >= self.rows {
                return Err(Error::DimensionMismatch(format!("row {r} out of range")));
            }
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite constraint coefficient".into()));
            }
        }
        self.cost.push(cost);
        self.upper.push(upper);
        self.cols.push(column.to_vec());
        Ok(self.cols.len() - 1)
    }

    pub fn solve(&self) -> Result<LpSolution> {
        Simplex::new(self)?.run()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum VarStatus {
    Basic(usize),
    AtLower,
    AtUpper,
}

struct Simplex<'a> {
    lp: &'a LpProblem,
    n_struct: usize,
    /// Structural columns plus one artificial per row.
    cost: Vec<f64>,
    upper: Vec<f64>,
    cols: Vec<Vec<(usize, f64)>>,
    status: Vec<VarStatus>,
    basis: Vec<usize>,
    b_inv: DMatrix<f64>,
    xb: Vec<f64>,
    iterations: usize,
}

impl<'a> Simplex<'a> {
    fn new(lp: &'a LpProblem) -> Result<Self> {
        let m = lp.rows;
        let n = lp.cols.len();
        if n == 0 {
            return Err(Error::LpFailed("no variables".into()));
        }
        let mut cols = lp.cols.clone();
        let mut cost = vec![0.0; n];
        let mut upper = lp.upper.clone();
        // Artificial variables form the starting identity basis; their sign
        // matches the rhs so the start is feasible with structurals at 0.
        let mut basis = Vec::with_capacity(m);
        let mut status = vec![VarStatus::AtLower; n];
        let mut xb = Vec::with_capacity(m);
        for r in 0..m {
            let sign = if lp.rhs[r] < 0.0 { -1.0 } else { 1.0 };
            cols.push(vec![(r, sign)]);
            cost.push(0.0);
            upper.push(f64::INFINITY);
            status.push(VarStatus::Basic(r));
            basis.push(n + r);
            xb.push(lp.rhs[r].abs());
        }
        Ok(Self {
            lp,
            n_struct: n,
            cost,
            upper,
            cols,
            status,
            basis,
            b_inv: DMatrix::identity(m, m),
            xb,
            iterations: 0,
        })
    }

    fn run(mut self) -> Result<LpSolution> {
        // Phase 1: drive the artificials to zero.
        for v in self.n_struct..self.cols.len() {
            self.cost[v] = 1.0;
        }
        self.optimize()?;
        let infeas: f64 = self
            .basis
            .iter()
            .zip(&self.xb)
            .filter(|(v, _)| **v >= self.n_struct)
            .map(|(_, x)| x.abs())
            .sum();
        if infeas > 1e-7 {
            return Err(Error::LpFailed(format!("infeasible (phase-1 residual {infeas:.3e})")));
        }
        // Freeze artificials at zero and restore the real objective.
        for v in self.n_struct..self.cols.len() {
            self.cost[v] = 0.0;
            self.upper[v] = 0.0;
        }
        for (v, c) in self.lp.cost.iter().enumerate() {
            self.cost[v] = *c;
        }
        self.optimize()?;

        let mut x = vec![0.0; self.n_struct];
        for (v, st) in self.status.iter().enumerate().take(self.n_struct) {
            x[v] = match st {
                VarStatus::Basic(r) => self.xb[*r],
                VarStatus::AtLower => 0.0,
                VarStatus::AtUpper => self.upper[v],
            };
        }
        let objective: f64 = x.iter().zip(&self.lp.cost).map(|(a, b)| a * b).sum();
        let duality_gap = self.duality_gap(&x, objective);
        Ok(LpSolution { x, objective, duality_gap, iterations: self.iterations })
    }

    fn duals(&self) -> Vec<f64> {
        let m = self.lp.rows;
        let mut y = vec![0.0; m];
        for (r, &v) in self.basis.iter().enumerate() {
            let cb = self.cost[v];
            if cb != 0.0 {
                for i in 0..m {
                    y[i] += cb * self.b_inv[(r, i)];
                }
            }
        }
        y
    }

    fn reduced_cost(&self, v: usize, y: &[f64]) -> f64 {
        let mut d = self.cost[v];
        for &(r, a) in &self.cols[v] {
            d -= y[r] * a;
        }
        d
    }

    fn optimize(&mut self) -> Result<()> {
        let m = self.lp.rows;
        loop {
            self.iterations += 1;
            if self.iterations > 200_000 {
                return Err(Error::LpFailed("iteration limit reached".into()));
            }
            let y = self.duals();
            // Bland: lowest-index eligible entering variable.
            let mut entering = None;
            for v in 0..self.cols.len() {
                match self.status[v] {
                    VarStatus::AtLower => {
                        if self.reduced_cost(v, &y) < -TOL && self.upper[v] > 0.0 {
                            entering = Some((v, 1.0));
                            break;
                        }
                    }
                    VarStatus::AtUpper => {
                        if self.reduced_cost(v, &y) > TOL {
                            entering = Some((v, -1.0));
                            break;
                        }
                    }
                    VarStatus::Basic(_) => {}
                }
            }
            let Some((enter, dir)) = entering else {
                return Ok(());
            };

            // FTRAN: w = B^-1 A_enter.
            let mut w = vec![0.0; m];
            for &(r, a) in &self.cols[enter] {
                for i in 0..m {
                    w[i] += self.b_inv[(i, r)] * a;
                }
            }

            // Ratio test over basic bounds plus the entering variable's own
            // span (bound flip). Ties pick the lowest basic variable index.
            let mut limit = self.upper[enter];
            let mut leave: Option<usize> = None;
            for i in 0..m {
                let rate = dir * w[i];
                let room = if rate > TOL {
                    self.xb[i] / rate
                } else if rate < -TOL {
                    let ub = self.upper[self.basis[i]];
                    if ub.is_finite() {
                        (ub - self.xb[i]) / -rate
                    } else {
                        continue;
                    }
                } else {
                    continue;
                };
                let better = match leave {
                    None => room < limit - TOL,
                    Some(prev) => {
                        room < limit - TOL
                            || (room < limit + TOL && self.basis[i] < self.basis[prev])
                    }
                };
                if better {
                    limit = room.max(0.0);
                    leave = Some(i);
                }
            }
            if limit.is_infinite() {
                return Err(Error::LpFailed("objective unbounded below".into()));
            }

            match leave {
                None => {
                    // Bound flip: the entering variable crosses its span.
                    for i in 0..m {
                        self.xb[i] -= dir * w[i] * limit;
                    }
                    self.status[enter] = if dir > 0.0 {
                        VarStatus::AtUpper
                    } else {
                        VarStatus::AtLower
                    };
                }
                Some(r) => {
                    let pivot = w[r];
                    if pivot.abs() < 1e-11 {
                        return Err(Error::LpFailed("numerically singular pivot".into()));
                    }
                    let old = self.basis[r];
                    let hits_upper = dir * w[r] < 0.0;
                    self.status[old] = if hits_upper {
                        VarStatus::AtUpper
                    } else {
                        VarStatus::AtLower
                    };
                    for i in 0..m {
                        self.xb[i] -= dir * w[i] * limit;
                    }
                    let entering_value = if dir > 0.0 {
                        limit
                    } else {
                        self.upper[enter] - limit
                    };
                    self.basis[r] = enter;
                    self.status[enter] = VarStatus::Basic(r);
                    self.xb[r] = entering_value;
                    // Elementary row update of B^-1.
                    let inv_pivot = 1.0 / pivot;
                    for c in 0..m {
                        self.b_inv[(r, c)] *= inv_pivot;
                    }
                    for i in 0..m {
                        if i != r {
                            let f = w[i];
                            if f != 0.0 {
                                for c in 0..m {
                                    self.b_inv[(i, c)] -= f * self.b_inv[(r, c)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn duality_gap(&self, _x: &[f64], objective: f64) -> f64 {
        let y = self.duals();
        let mut dual: f64 = y.iter().zip(&self.lp.rhs).map(|(a, b)| a * b).sum();
        for v in 0..self.n_struct {
            if self.status[v] == VarStatus::AtUpper {
                dual += self.reduced_cost(v, &y) * self.upper[v];
            }
        }
        (objective - dual).abs() / (1.0 + objective.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tiny_transport_problem() {
        // min x0 + 2 x1  s.t.  x0 + x1 = 1,  x <= 1 each: optimum all on x0.
        let mut lp = LpProblem::new(1, vec![1.0]).unwrap();
        lp.add_variable(1.0, 1.0, &[(0, 1.0)]).unwrap();
        lp.add_variable(2.0, 1.0, &[(0, 1.0)]).unwrap();
        let sol = lp.solve().unwrap();
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert!(sol.duality_gap < 1e-7);
    }

    #[test]
    fn upper_bounds_bind() {
        // min -x0 - x1  s.t.  x0 + x1 = 1.5, both <= 1.
        let mut lp = LpProblem::new(1, vec![1.5]).unwrap();
        lp.add_variable(-1.0, 1.0, &[(0, 1.0)]).unwrap();
        lp.add_variable(-1.0, 1.0, &[(0, 1.0)]).unwrap();
        let sol = lp.solve().unwrap();
        assert_abs_diff_eq!(sol.objective, -1.5, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_detected() {
        // x0 = 2 with x0 <= 1 is infeasible.
        let mut lp = LpProblem::new(1, vec![2.0]).unwrap();
        lp.add_variable(1.0, 1.0, &[(0, 1.0)]).unwrap();
        assert!(matches!(lp.solve(), Err(Error::LpFailed(_))));
    }

    #[test]
    fn degenerate_equalities_terminate() {
        // Redundant rows force degenerate pivots; Bland's rule must still
        // terminate at the optimum.
        let mut lp = LpProblem::new(3, vec![1.0, 1.0, 2.0]).unwrap();
        lp.add_variable(1.0, f64::INFINITY, &[(0, 1.0), (2, 1.0)]).unwrap();
        lp.add_variable(1.0, f64::INFINITY, &[(1, 1.0), (2, 1.0)]).unwrap();
        lp.add_variable(3.0, f64::INFINITY, &[(2, 1.0)]).unwrap();
        let sol = lp.solve().unwrap();
        assert_abs_diff_eq!(sol.objective, 2.0, epsilon = 1e-9);
    }
}
