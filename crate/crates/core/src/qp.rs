//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀ H x + gᵀ x
//! subject to  A_eq x  = b_eq
//!             A_in x ≤ b_in
//! ```
//!
//! with a dual active-set method (Goldfarb–Idnani): start from the
//! equality-constrained minimizer and repeatedly add the most violated
//! inequality, dropping active constraints whose multiplier would turn
//! negative. Every iterate is dual feasible, so the first primal-feasible
//! iterate is optimal, and an exhausted dual step proves infeasibility.
//!
//! The solver is deterministic: ties are broken by lowest constraint index.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest eigenvalue tolerated before `H` is declared indefinite.
pub const PSD_TOLERANCE: f64 = -1e-8;
/// Diagonal shift applied when `H` is only semidefinite.
pub const REGULARIZATION: f64 = 1e-10;

const FEASIBILITY_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub dual_eq: DVector<f64>,
    /// Non-negative at optimality.
    pub dual_in: DVector<f64>,
    /// Largest violation among stationarity, primal feasibility, dual
    /// feasibility and complementarity.
    pub kkt_residual: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem with `n` variables.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    pub fn solve(&self) -> Result<QpSolution> {
        solve_qp(self)
    }

    fn check_dimensions(&self) -> Result<()> {
        let n = self.g.len();
        let mismatch = |what: &str, got: String| {
            Err(Error::DimensionMismatch(format!("{what}: expected {n} columns, got {got}")))
        };
        if self.h.nrows() != n || self.h.ncols() != n {
            return mismatch("H", format!("{}x{}", self.h.nrows(), self.h.ncols()));
        }
        if self.a_eq.ncols() != n {
            return mismatch("A_eq", self.a_eq.ncols().to_string());
        }
        if self.a_in.ncols() != n {
            return mismatch("A_in", self.a_in.ncols().to_string());
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::DimensionMismatch(format!(
                "A_eq has {} rows but b_eq has {}",
                self.a_eq.nrows(),
                self.b_eq.len()
            )));
        }
        if self.a_in.nrows() != self.b_in.len() {
            return Err(Error::DimensionMismatch(format!(
                "A_in has {} rows but b_in has {}",
                self.a_in.nrows(),
                self.b_in.len()
            )));
        }
        Ok(())
    }

    /// KKT residual of a candidate primal/dual pair.
    pub fn kkt_residual(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let stat = &self.h * x + &self.g + self.a_eq.transpose() * y + self.a_in.transpose() * z;
        let mut res = stat.amax();
        if self.a_eq.nrows() > 0 {
            res = res.max((&self.a_eq * x - &self.b_eq).amax());
        }
        if self.a_in.nrows() > 0 {
            let slack = &self.a_in * x - &self.b_in;
            for i in 0..slack.len() {
                res = res.max(slack[i].max(0.0));
                res = res.max((-z[i]).max(0.0));
                res = res.max((z[i] * slack[i]).abs());
            }
        }
        res
    }
}

/// One active constraint: equality rows are never released.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Active {
    Eq(usize),
    In(usize),
}

struct Workspace<'a> {
    p: &'a QpProblem,
    h: DMatrix<f64>,
    active: Vec<Active>,
}

impl Workspace<'_> {
    fn row(&self, c: Active) -> DVector<f64> {
        match c {
            Active::Eq(i) => self.p.a_eq.row(i).transpose(),
            Active::In(i) => self.p.a_in.row(i).transpose(),
        }
    }

    fn rhs(&self, c: Active) -> f64 {
        match c {
            Active::Eq(i) => self.p.b_eq[i],
            Active::In(i) => self.p.b_in[i],
        }
    }

    fn kkt_matrix(&self) -> DMatrix<f64> {
        let n = self.h.nrows();
        let m = self.active.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.h);
        for (j, &c) in self.active.iter().enumerate() {
            let a = self.row(c);
            k.view_mut((0, n + j), (n, 1)).copy_from(&a);
            k.view_mut((n + j, 0), (1, n)).copy_from(&a.transpose());
        }
        k
    }

    /// Solves the KKT system for the current active set with the given
    /// right-hand side blocks.
    fn solve_kkt(&self, top: &DVector<f64>, bottom: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.h.nrows();
        let m = self.active.len();
        let k = self.kkt_matrix();
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(top);
        rhs.rows_mut(n, m).copy_from(bottom);
        let sol = k.full_piv_lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
    }

    /// Whether `a` is (numerically) in the span of the active normals.
    fn is_dependent(&self, a: &DVector<f64>) -> bool {
        if self.active.is_empty() {
            return a.norm() <= PIVOT_TOL;
        }
        let n = a.len();
        let mut basis = DMatrix::zeros(n, self.active.len());
        for (j, &c) in self.active.iter().enumerate() {
            basis.set_column(j, &self.row(c));
        }
        let qr = basis.clone().qr();
        let q = qr.q();
        let proj = &q * (q.transpose() * a);
        (a - proj).norm() <= 1e-10 * (1.0 + a.norm())
    }
}

/// Solves a dense convex QP.
///
/// # Errors
/// Dimension mismatches and indefinite Hessians are reported as errors.
/// Infeasibility is not an error: it is signalled through
/// [`QpStatus::Infeasible`].
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    p.check_dimensions()?;
    let n = p.dim();
    let sym = (&p.h + p.h.transpose()) * 0.5;
    if n > 0 {
        let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
        if min_eig < PSD_TOLERANCE {
            return Err(Error::NotPositiveSemidefinite(min_eig));
        }
    }
    let h = if sym.clone().cholesky().is_some() {
        sym
    } else {
        sym + DMatrix::identity(n, n) * REGULARIZATION
    };

    let mut ws = Workspace {
        p,
        h,
        active: Vec::new(),
    };
    let neg_g = -&p.g;

    // Equality rows: keep a linearly independent subset, verify the rest.
    let mut redundant = Vec::new();
    for i in 0..p.a_eq.nrows() {
        let a = p.a_eq.row(i).transpose();
        if ws.is_dependent(&a) {
            redundant.push(i);
        } else {
            ws.active.push(Active::Eq(i));
        }
    }
    let b0 = DVector::from_iterator(ws.active.len(), ws.active.iter().map(|&c| ws.rhs(c)));
    let (mut x, mut u) = ws
        .solve_kkt(&neg_g, &b0)
        .ok_or(Error::Singular("equality-constrained KKT system"))?;
    for &i in &redundant {
        let r = (p.a_eq.row(i) * &x)[0] - p.b_eq[i];
        if r.abs() > 1e-7 * (1.0 + p.b_eq[i].abs()) {
            return Ok(finish(p, &ws, x, u, QpStatus::Infeasible, 0));
        }
    }

    let max_iter = 50 * (n + p.a_in.nrows() + p.a_eq.nrows()) + 100;
    let mut iter = 0;
    loop {
        // Most violated inequality not already active.
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..p.a_in.nrows() {
            if ws.active.contains(&Active::In(i)) {
                continue;
            }
            let viol = (p.a_in.row(i) * &x)[0] - p.b_in[i];
            let tol = FEASIBILITY_TOL * (1.0 + p.b_in[i].abs());
            if viol > tol && pick.map_or(true, |(_, v)| viol > v) {
                pick = Some((i, viol));
            }
        }
        let Some((ip, _)) = pick else {
            let (x, u) = polish(&ws, &neg_g).unwrap_or((x, u));
            return Ok(finish(p, &ws, x, u, QpStatus::Optimal, iter));
        };

        let np = p.a_in.row(ip).transpose();
        let mut up = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Ok(finish(p, &ws, x, u, QpStatus::MaxIterations, iter));
            }
            // Directional derivatives of (x, u) as the multiplier of the
            // entering constraint grows.
            let zero = DVector::zeros(ws.active.len());
            let Some((dx, du)) = ws.solve_kkt(&(-&np), &zero) else {
                return Ok(finish(p, &ws, x, u, QpStatus::Infeasible, iter));
            };
            let rate = np.dot(&dx);
            let slack = np.dot(&x) - p.b_in[ip];
            let t_full = if rate < -PIVOT_TOL && dx.amax() > PIVOT_TOL {
                slack / -rate
            } else {
                f64::INFINITY
            };
            // Blocking active inequalities whose multiplier would go negative.
            let mut t_part = f64::INFINITY;
            let mut block = None;
            for (j, &c) in ws.active.iter().enumerate() {
                if let Active::In(_) = c {
                    if du[j] < -PIVOT_TOL {
                        let t = u[j] / -du[j];
                        if t < t_part {
                            t_part = t;
                            block = Some(j);
                        }
                    }
                }
            }
            if !t_full.is_finite() && !t_part.is_finite() {
                return Ok(finish(p, &ws, x, u, QpStatus::Infeasible, iter));
            }
            if t_full <= t_part {
                x += &dx * t_full;
                u += &du * t_full;
                up += t_full;
                ws.active.push(Active::In(ip));
                u = u.push(up);
                break;
            }
            let t = t_part.max(0.0);
            x += &dx * t;
            u += &du * t;
            up += t;
            let j = block.expect("finite partial step has a blocking constraint");
            ws.active.remove(j);
            u = u.remove_row(j);
        }
    }
}

/// Re-solves the KKT system on the final active set to remove drift
/// accumulated over the pivots.
fn polish(ws: &Workspace<'_>, neg_g: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let b = DVector::from_iterator(ws.active.len(), ws.active.iter().map(|&c| ws.rhs(c)));
    let (x, u) = ws.solve_kkt(neg_g, &b)?;
    let negative = ws
        .active
        .iter()
        .zip(u.iter())
        .any(|(c, v)| matches!(c, Active::In(_)) && *v < -1e-8);
    if negative {
        None
    } else {
        Some((x, u))
    }
}

fn finish(
    p: &QpProblem,
    ws: &Workspace<'_>,
    x: DVector<f64>,
    u: DVector<f64>,
    status: QpStatus,
    iterations: usize,
) -> QpSolution {
    let mut dual_eq = DVector::zeros(p.a_eq.nrows());
    let mut dual_in = DVector::zeros(p.a_in.nrows());
    for (j, &c) in ws.active.iter().enumerate() {
        match c {
            Active::Eq(i) => dual_eq[i] = u[j],
            Active::In(i) => dual_in[i] = u[j].max(0.0),
        }
    }
    let kkt_residual = p.kkt_residual(&x, &dual_eq, &dual_in);
    let objective = p.objective(&x);
    QpSolution {
        primal: x,
        dual_eq,
        dual_in,
        kkt_residual,
        status,
        iterations,
        objective,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn unconstrained_minimum() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![-2.0, 0.0]);
        let s = p.solve().unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.primal, dvector![2.0, 0.0], epsilon = 1e-12);
    }

    #[test]
    fn single_active_bound() {
        // min x² s.t. x ≥ 1, written as -x ≤ -1.
        let p = QpProblem::new(dmatrix![2.0], dvector![0.0])
            .with_inequalities(dmatrix![-1.0], dvector![-1.0]);
        let s = p.solve().unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.primal[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.dual_in[0], 2.0, epsilon = 1e-12);
        assert!(s.kkt_residual < 1e-10);
    }

    #[test]
    fn equality_and_inequality() {
        // min x² + y² s.t. x + y = 2, x ≤ 0.5.
        let p = QpProblem::new(DMatrix::identity(2, 2) * 2.0, dvector![0.0, 0.0])
            .with_equalities(dmatrix![1.0, 1.0], dvector![2.0])
            .with_inequalities(dmatrix![1.0, 0.0], dvector![0.5]);
        let s = p.solve().unwrap();
        assert_abs_diff_eq!(s.primal, dvector![0.5, 1.5], epsilon = 1e-12);
        assert!(s.kkt_residual < 1e-10);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let p = QpProblem::new(dmatrix![1.0], dvector![0.0])
            .with_inequalities(dmatrix![1.0; -1.0], dvector![-1.0, -1.0]);
        assert_eq!(p.solve().unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0])
            .with_equalities(dmatrix![1.0, 1.0; 2.0, 2.0], dvector![1.0, 3.0]);
        assert_eq!(p.solve().unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0])
            .with_equalities(dmatrix![1.0, 1.0; 2.0, 2.0], dvector![1.0, 2.0]);
        let s = p.solve().unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.primal, dvector![0.5, 0.5], epsilon = 1e-12);
    }

    #[test]
    fn indefinite_hessian_is_rejected() {
        let p = QpProblem::new(dmatrix![1.0, 0.0; 0.0, -1.0], dvector![0.0, 0.0]);
        assert!(matches!(p.solve(), Err(Error::NotPositiveSemidefinite(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = QpProblem::new(DMatrix::identity(3, 3), dvector![0.0, 0.0]);
        assert!(matches!(p.solve(), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn semidefinite_hessian_with_bounds() {
        // Linear objective in y, bounded by a box.
        let p = QpProblem::new(dmatrix![1.0, 0.0; 0.0, 0.0], dvector![0.0, -1.0])
            .with_inequalities(dmatrix![0.0, 1.0; 0.0, -1.0], dvector![3.0, 3.0]);
        let s = p.solve().unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.primal[1], 3.0, epsilon = 1e-6);
    }
}
