//! Dense strictly convex QP solver:
//!
//! minimize ½ xᵀHx + gᵀx  subject to  A x = b,  l ≤ C x ≤ u
//!
//! Dual active-set method (Goldfarb-Idnani). It starts from the
//! equality-constrained minimum and adds the most violated inequality at
//! each outer step, dropping active constraints whose multiplier would turn
//! negative. Equality rows are first reduced to an independent set so that
//! redundant but consistent constraints are accepted.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::PhysicsError;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    /// Symmetric positive definite Hessian.
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c: DMatrix<f64>,
    /// Entries may be `-inf`.
    pub lower: DVector<f64>,
    /// Entries may be `+inf`.
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Problem with no constraints.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        QpProblem {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            c: DMatrix::zeros(0, n),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, c: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.c = c;
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    fn check(&self) -> Result<(), PhysicsError> {
        let n = self.dim();
        let ok = self.h.shape() == (n, n)
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.c.ncols() == n
            && self.c.nrows() == self.lower.len()
            && self.c.nrows() == self.upper.len();
        if !ok {
            return Err(PhysicsError::Dimension("QP matrices have inconsistent shapes".into()));
        }
        let finite = |m: &[f64]| m.iter().fold(0.0, |acc, v| acc + v * 0.0) == 0.0;
        if ![self.h.as_slice(), self.g.as_slice(), self.a_eq.as_slice(), self.b_eq.as_slice(), self.c.as_slice()]
            .into_iter()
            .all(finite)
            || self.lower.iter().any(|v| v.is_nan() || *v == f64::INFINITY)
            || self.upper.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY)
        {
            return Err(PhysicsError::NonFinite("QP data".into()));
        }
        if let Some(i) = (0..self.lower.len()).find(|&i| self.lower[i] > self.upper[i]) {
            return Err(PhysicsError::Infeasible {
                residual: self.lower[i] - self.upper[i],
                detail: format!("inequality {i} has lower bound above upper bound"),
            });
        }
        Ok(())
    }

    /// KKT residuals of a candidate primal-dual point. `y` pairs with the
    /// equality rows, `mu` with the inequality rows (positive when the lower
    /// bound binds, negative when the upper bound does).
    pub fn kkt_residuals(&self, x: &DVector<f64>, y: &DVector<f64>, mu: &DVector<f64>) -> KktResiduals {
        let grad = &self.h * x + &self.g - self.a_eq.transpose() * y - self.c.transpose() * mu;
        let eq = &self.a_eq * x - &self.b_eq;
        let cx = &self.c * x;
        let mut inequality: f64 = 0.0;
        let mut complementarity: f64 = 0.0;
        let mut dual: f64 = 0.0;
        for i in 0..cx.len() {
            let lo = cx[i] - self.lower[i];
            let hi = self.upper[i] - cx[i];
            inequality = inequality.max(-lo).max(-hi);
            let (slack, bound) = if mu[i] > 0.0 {
                (lo, self.lower[i])
            } else {
                (hi, self.upper[i])
            };
            if mu[i] != 0.0 {
                if bound.is_finite() {
                    complementarity = complementarity.max(mu[i].abs() * slack.abs());
                } else {
                    dual = dual.max(mu[i].abs());
                }
            }
        }
        KktResiduals {
            stationarity: grad.amax(),
            equality: eq.amax(),
            inequality,
            complementarity,
            dual,
        }
    }
}

/// Infinity norms of the KKT conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub equality: f64,
    /// Largest bound violation.
    pub inequality: f64,
    /// Largest |multiplier × slack| over bound constraints.
    pub complementarity: f64,
    /// Largest multiplier attached to an infinite bound.
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.equality).max(self.inequality).max(self.complementarity).max(self.dual)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub max_iterations: usize,
    /// Feasibility tolerance on normalized constraint rows.
    pub tolerance: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings { max_iterations: 200, tolerance: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per equality row.
    pub eq_multipliers: DVector<f64>,
    /// One signed multiplier per inequality row, see [`QpProblem::kkt_residuals`].
    pub ineq_multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
}

/// Active constraint written as `n·x >= d` (equalities as `n·x = d`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Row {
    Eq(usize),
    Ineq(usize, Side),
}

/// Factorizations for one active set, shared between the KKT solve and the
/// step directions.
type Factors = Rc<(DMatrix<f64>, DMatrix<f64>)>;

struct Solver<'a> {
    qp: &'a QpProblem,
    h_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// Independent equality rows and right-hand side.
    a_red: DMatrix<f64>,
    b_red: DVector<f64>,
    /// Maps reduced multipliers back to the original equality rows.
    u_red: DMatrix<f64>,
    row_norms: Vec<f64>,
    /// Last factorization and the active set it belongs to.
    cache: RefCell<Option<(Vec<Row>, Factors)>>,
}

impl Solver<'_> {
    fn normal(&self, r: Row) -> DVector<f64> {
        match r {
            Row::Eq(i) => self.a_red.row(i).transpose(),
            Row::Ineq(i, Side::Lower) => self.qp.c.row(i).transpose(),
            Row::Ineq(i, Side::Upper) => -self.qp.c.row(i).transpose(),
        }
    }

    fn rhs(&self, r: Row) -> f64 {
        match r {
            Row::Eq(i) => self.b_red[i],
            Row::Ineq(i, Side::Lower) => self.qp.lower[i],
            Row::Ineq(i, Side::Upper) => -self.qp.upper[i],
        }
    }

    fn matrix(&self, active: &[Row]) -> DMatrix<f64> {
        let n = self.qp.dim();
        let mut m = DMatrix::zeros(active.len(), n);
        for (k, &r) in active.iter().enumerate() {
            m.set_row(k, &self.normal(r).transpose());
        }
        m
    }

    /// Orthogonal factor and triangle of `L⁻¹ Nᵀ`, where `H = L Lᵀ` and `N`
    /// holds the active rows. Working with this factorization instead of
    /// `N H⁻¹ Nᵀ` keeps the conditioning of the active set unsquared.
    fn factor(&self, active: &[Row]) -> Result<Factors, PhysicsError> {
        if let Some((rows, f)) = self.cache.borrow().as_ref() {
            if rows == active {
                return Ok(Rc::clone(f));
            }
        }
        let mut b = self.matrix(active).transpose();
        self.h_chol.l().solve_lower_triangular_mut(&mut b);
        let qr = b.qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if r.diagonal().iter().any(|d| d.abs() <= 1e-13 * scale) {
            return Err(PhysicsError::Dimension("active constraints became dependent".into()));
        }
        let f = Rc::new((qr.q(), r));
        *self.cache.borrow_mut() = Some((active.to_vec(), Rc::clone(&f)));
        Ok(f)
    }

    /// Minimizer with every active row held as an equality, and the
    /// multipliers of those rows.
    fn solve_active(&self, active: &[Row]) -> Result<(DVector<f64>, DVector<f64>), PhysicsError> {
        let d = DVector::from_iterator(active.len(), active.iter().map(|&row| self.rhs(row)));
        self.solve_kkt(active, -&self.qp.g, &d)
    }

    /// Solves `H x − Nᵀ u = f`, `N x = d` for the active rows `N`.
    fn solve_kkt(&self, active: &[Row], f: DVector<f64>, d: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), PhysicsError> {
        let l = self.h_chol.l();
        let mut y0 = f;
        l.solve_lower_triangular_mut(&mut y0);
        if active.is_empty() {
            let mut x = y0;
            l.tr_solve_lower_triangular_mut(&mut x);
            return Ok((x, DVector::zeros(0)));
        }
        let f = self.factor(active)?;
        let (q, r) = (&f.0, &f.1);
        let w = r.tr_solve_upper_triangular(d).expect("nonsingular triangle");
        let qty0 = q.transpose() * &y0;
        let u = r.solve_upper_triangular(&(&w - &qty0)).expect("nonsingular triangle");
        let mut x = &y0 + q * (w - qty0);
        l.tr_solve_lower_triangular_mut(&mut x);
        Ok((x, u))
    }

    /// Primal direction `z` and dual direction `r` for adding `np`.
    fn directions(&self, active: &[Row], np: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), PhysicsError> {
        let l = self.h_chol.l();
        let mut v = np.clone();
        l.solve_lower_triangular_mut(&mut v);
        if active.is_empty() {
            l.tr_solve_lower_triangular_mut(&mut v);
            return Ok((v, DVector::zeros(0)));
        }
        let f = self.factor(active)?;
        let (q, r) = (&f.0, &f.1);
        let qtv = q.transpose() * &v;
        let dual = r.solve_upper_triangular(&qtv).expect("nonsingular triangle");
        let mut z = v - q * qtv;
        l.tr_solve_lower_triangular_mut(&mut z);
        Ok((z, dual))
    }

    fn slack(&self, r: Row, x: &DVector<f64>) -> f64 {
        (self.normal(r).dot(x) - self.rhs(r)) / self.row_norms_of(r)
    }

    fn row_norms_of(&self, r: Row) -> f64 {
        match r {
            Row::Eq(_) => 1.0,
            Row::Ineq(i, _) => self.row_norms[i],
        }
    }
}

/// Splits `a x = b` into independent rows. Fails when the rows are
/// inconsistent.
fn reduce_equalities(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>), PhysicsError> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return Ok((DMatrix::zeros(0, n), DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    if a.nrows() <= n {
        let r = a.transpose().qr().unpack_r();
        let d = r.diagonal().abs();
        if d.min() > 1e-8 * d.max() {
            return Ok((a.clone(), b.clone(), DMatrix::identity(a.nrows(), a.nrows())));
        }
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let smax = svd.singular_values.max();
    let cutoff = smax * 1e-10 * a.nrows().max(n) as f64;
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > cutoff).collect();
    let mut a_red = DMatrix::zeros(keep.len(), n);
    let mut u_red = DMatrix::zeros(a.nrows(), keep.len());
    for (k, &i) in keep.iter().enumerate() {
        a_red.set_row(k, &(vt.row(i) * svd.singular_values[i]));
        u_red.set_column(k, &u.column(i));
    }
    let b_red = u_red.transpose() * b;
    let residual = (b - &u_red * &b_red).amax();
    if residual > 1e-9 * (1.0 + b.amax()) {
        return Err(PhysicsError::Infeasible { residual, detail: "equality constraints are inconsistent".into() });
    }
    Ok((a_red, b_red, u_red))
}

pub fn solve_qp(qp: &QpProblem, settings: &QpSettings) -> Result<QpSolution, PhysicsError> {
    qp.check()?;
    let h_chol = qp.h.clone().cholesky().ok_or(PhysicsError::NotPositiveDefinite("QP Hessian"))?;
    let (a_red, b_red, u_red) = reduce_equalities(&qp.a_eq, &qp.b_eq)?;
    let row_norms = (0..qp.c.nrows()).map(|i| qp.c.row(i).norm().max(f64::MIN_POSITIVE)).collect();
    let s = Solver { qp, h_chol, a_red, b_red, u_red, row_norms, cache: RefCell::new(None) };
    let tol = settings.tolerance;

    let mut active: Vec<Row> = (0..s.a_red.nrows()).map(Row::Eq).collect();
    let (mut x, mut u) = s.solve_active(&active)?;
    let mut iterations = 0;

    loop {
        // Most violated inequality.
        let mut worst: Option<(Row, f64)> = None;
        for i in 0..qp.c.nrows() {
            for side in [Side::Lower, Side::Upper] {
                let r = Row::Ineq(i, side);
                if !s.rhs(r).is_finite() || active.contains(&r) {
                    continue;
                }
                let sl = s.slack(r, &x);
                if sl < -tol && worst.is_none_or(|(_, w)| sl < w) {
                    worst = Some((r, sl));
                }
            }
        }
        let Some((p, _)) = worst else { break };
        let np = s.normal(p);
        loop {
            iterations += 1;
            if iterations > settings.max_iterations {
                let violation = -s.slack(p, &x) * s.row_norms_of(p);
                return Err(PhysicsError::MaxIterations { iterations: settings.max_iterations, violation });
            }
            let (z, r) = s.directions(&active, &np)?;
            // Partial step: the first active inequality whose multiplier hits zero.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &row) in active.iter().enumerate() {
                if matches!(row, Row::Ineq(..)) && r[k] > 0.0 {
                    let t = u[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let curvature = np.dot(&z);
            let scale = np.dot(&s.h_chol.solve(&np));
            let t2 = if curvature > 1e-12 * scale { -(np.dot(&x) - s.rhs(p)) / curvature } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                let residual = -s.slack(p, &x) * s.row_norms_of(p);
                return Err(PhysicsError::Infeasible { residual, detail: format!("no step can satisfy constraint {p:?}") });
            }
            if t2.is_finite() {
                x += &z * t;
            }
            u -= &r * t;
            if t == t2 {
                active.push(p);
                // Re-solve on the new active set to keep round-off from drifting.
                let (xs, us) = s.solve_active(&active)?;
                x = xs;
                u = us;
                break;
            }
            let k = drop.expect("finite partial step has a blocking constraint");
            active.remove(k);
            u = u.remove_row(k);
        }
    }

    // Iterative refinement on the final active set; the small weights on
    // the contact forces leave the Hessian poorly conditioned.
    if !active.is_empty() {
        let n = s.matrix(&active);
        let d = DVector::from_iterator(active.len(), active.iter().map(|&row| s.rhs(row)));
        for _ in 0..2 {
            let r1 = &qp.h * &x + &qp.g - n.transpose() * &u;
            let r2 = &d - &n * &x;
            let (dx, du) = s.solve_kkt(&active, -r1, &r2)?;
            x += dx;
            u += du;
        }
    }

    let mut y_red = DVector::zeros(s.a_red.nrows());
    let mut mu = DVector::zeros(qp.c.nrows());
    for (k, &row) in active.iter().enumerate() {
        match row {
            Row::Eq(i) => y_red[i] = u[k],
            Row::Ineq(i, Side::Lower) => mu[i] = u[k],
            Row::Ineq(i, Side::Upper) => mu[i] = -u[k],
        }
    }
    let y = &s.u_red * y_red;
    let residuals = qp.kkt_residuals(&x, &y, &mu);
    Ok(QpSolution { objective: qp.objective(&x), x, eq_multipliers: y, ineq_multipliers: mu, iterations, residuals })
}
