//! Dense strictly convex QP solved with the Goldfarb–Idnani dual active-set
//! method:
//!
//! ```text
//! min ½ xᵀ G x + aᵀ x   s.t.   C x ≥ b
//! ```
//!
//! The method starts from the unconstrained minimizer and adds violated
//! constraints one at a time, so no feasible starting point is needed and
//! infeasibility is detected exactly. Multipliers of the final active set are
//! returned alongside the primal solution.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("QP constraints are infeasible")]
    Infeasible,
    #[error("QP active-set iterations exhausted")]
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// One constraint normal per row.
    pub constraints: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Nonnegative multiplier per constraint row (zero when inactive).
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

const FEAS_TOL: f64 = 1e-12;
const ZERO_TOL: f64 = 1e-14;

pub fn solve(qp: &DenseQp) -> Result<QpSolution, QpError> {
    let n = qp.hessian.nrows();
    let m = qp.constraints.nrows();
    let chol = Cholesky::new(qp.hessian.clone()).ok_or(QpError::NotPositiveDefinite)?;
    let ginv = chol.inverse();

    let mut x = -(&ginv * &qp.linear);
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut in_active = vec![false; m];
    let max_iter = 10 * (m + n) + 50;
    let mut iterations = 0;
    let scale: Vec<f64> = (0..m).map(|i| 1.0 + qp.rhs[i].abs()).collect();

    let slack = |x: &DVector<f64>, i: usize| qp.constraints.row(i).dot(&x.transpose()) - qp.rhs[i];

    loop {
        // most violated (scaled) constraint
        let mut p = None;
        let mut worst = -FEAS_TOL;
        for i in 0..m {
            if in_active[i] {
                continue;
            }
            let s = slack(&x, i) / scale[i];
            if s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else {
            let mut multipliers = DVector::zeros(m);
            for (&i, &u) in active.iter().zip(&mult) {
                multipliers[i] = u;
            }
            return Ok(QpSolution { x, multipliers, active, iterations });
        };
        let np: DVector<f64> = qp.constraints.row(p).transpose();
        let mut up = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations);
            }
            let gnp = &ginv * &np;
            let (z, r) = if active.is_empty() {
                (gnp, DVector::zeros(0))
            } else {
                let q = active.len();
                let mut nmat = DMatrix::zeros(n, q);
                for (j, &i) in active.iter().enumerate() {
                    nmat.set_column(j, &qp.constraints.row(i).transpose());
                }
                let ginv_n = &ginv * &nmat;
                let mmat = nmat.transpose() * &ginv_n;
                let t = nmat.transpose() * &gnp;
                let r = match Cholesky::new(mmat.clone()) {
                    Some(c) => c.solve(&t),
                    None => mmat.lu().solve(&t).ok_or(QpError::Infeasible)?,
                };
                let z = gnp - ginv_n * &r;
                (z, r)
            };

            // partial (dual) step length
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > ZERO_TOL {
                    let ratio = mult[j] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(j);
                    }
                }
            }
            // full (primal) step length
            let znp = z.dot(&np);
            let t2 = if z.amax() > ZERO_TOL * (1.0 + np.amax()) && znp > 0.0 {
                -slack(&x, p) / znp
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            for (j, rj) in r.iter().enumerate() {
                mult[j] -= t * rj;
            }
            up += t;
            if t2.is_infinite() {
                // pure dual step: constraint p is dependent on the active set
                let j = drop.expect("finite t implies a blocking constraint");
                in_active[active[j]] = false;
                active.remove(j);
                mult.remove(j);
                continue;
            }
            x += &z * t;
            if t2 <= t1 {
                active.push(p);
                mult.push(up.max(0.0));
                in_active[p] = true;
                break;
            }
            let j = drop.expect("t1 finite");
            in_active[active[j]] = false;
            active.remove(j);
            mult.remove(j);
        }
    }
}
