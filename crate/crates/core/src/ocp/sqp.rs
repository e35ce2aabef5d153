//! SQP with exact (quadratic) cost Hessian plus Levenberg regularization,
//! condensed QP subproblems and an ℓ1 merit line search.

use nalgebra::{DMatrix, DVector};

use crate::track::ConstCurvature;
use crate::vehicle::{step_rk4, StateVec, VehicleState, NX, SIGMA};

use super::nlp::{costates, defects, kkt_parts, linearize, Linearization};
use super::qp::{self, DenseQp, QpError};
use super::{CostWeights, NlpInstance, OcpError, OcpSpec, Theta};

/// Per-solve diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverStats {
    /// Number of QP subproblems solved.
    pub iterations: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub active_set_size: usize,
    pub relaxed: bool,
    /// `(merit before, merit after)` of every merit-decreasing step, same penalty.
    /// Full steps accepted on residual contraction near the solution are not listed.
    pub merit_steps: Vec<(f64, f64)>,
    pub step_sizes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualSolution {
    pub x: Vec<StateVec>,
    pub u: Vec<f64>,
    /// Equality multipliers λ_0..λ_N (λ_0 belongs to `x_0 = s0`).
    pub lambda: Vec<StateVec>,
    /// One multiplier per inequality row of the instance.
    pub mu: Vec<f64>,
    pub active: Vec<bool>,
    /// Lane rows were softened with slack to restore feasibility.
    pub relaxed: bool,
    pub kkt_residual: f64,
    pub converged: bool,
    pub stats: SolverStats,
}

/// Multipliers above this are treated as active.
pub const ACTIVE_EPS: f64 = 1e-6;

impl PrimalDualSolution {
    pub fn u0(&self) -> f64 {
        self.u[0]
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Receding-horizon warm start: drop stage 0, duplicate the last stage.
    pub fn shifted(&self, nlp: &NlpInstance) -> Self {
        let n = self.horizon();
        let mut x: Vec<StateVec> = self.x[1..].to_vec();
        x.push(self.x[n]);
        let mut u: Vec<f64> = self.u[1..].to_vec();
        u.push(self.u[n - 1]);
        let mut lambda: Vec<StateVec> = self.lambda[1..].to_vec();
        lambda.push(self.lambda[n]);
        let mu = (0..self.mu.len()).map(|i| self.mu[nlp.shifted_row(i)]).collect::<Vec<_>>();
        let active = mu.iter().map(|m| *m > ACTIVE_EPS).collect();
        Self {
            x,
            u,
            lambda,
            mu,
            active,
            relaxed: false,
            kkt_residual: f64::NAN,
            converged: false,
            stats: SolverStats::default(),
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Order-sensitive fingerprint of the active set.
    pub fn active_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.active.hash(&mut h);
        h.finish()
    }
}

struct Condensed {
    /// `∂Δx_k/∂Δu`, row-major 6×N per stage.
    sens: Vec<Vec<f64>>,
    /// Affine part of Δx_k.
    offset: Vec<StateVec>,
}

fn condense(nlp: &NlpInstance, lin: &Linearization, c: &[StateVec]) -> Condensed {
    let n = nlp.horizon;
    let mut sens = vec![vec![0.0; NX * n]; n + 1];
    let mut offset = vec![[0.0; NX]; n + 1];
    offset[0] = c[0];
    for k in 0..n {
        let a = &lin.a[k];
        let (head, tail) = sens.split_at_mut(k + 1);
        let sk = &head[k];
        let sk1 = &mut tail[0];
        for i in 0..NX {
            for j in 0..k {
                let mut acc = 0.0;
                for l in 0..NX {
                    acc += a[i][l] * sk[l * n + j];
                }
                sk1[i * n + j] = acc;
            }
            sk1[i * n + k] = lin.b[k][i];
            let mut acc = c[k + 1][i];
            for l in 0..NX {
                acc += a[i][l] * offset[k][l];
            }
            offset[k + 1][i] = acc;
        }
    }
    Condensed { sens, offset }
}

fn build_qp(
    nlp: &NlpInstance,
    w: &[f64],
    grad: &[f64],
    hdiag: &[f64],
    cond: &Condensed,
    relaxed: bool,
) -> DenseQp {
    let n = nlp.horizon;
    let nv = if relaxed { 2 * n } else { n };
    let reg = nlp.settings.regularization;
    let mut g = DMatrix::<f64>::zeros(nv, nv);
    let mut a = DVector::<f64>::zeros(nv);
    for k in 1..=n {
        let sk = &cond.sens[k];
        for i in 0..NX {
            let idx = nlp.x_index(k, i);
            let q = hdiag[idx] + reg;
            let row = &sk[i * n..i * n + k];
            let lin_coef = q * cond.offset[k][i] + grad[idx];
            for j in 0..k {
                a[j] += row[j] * lin_coef;
                let qr = q * row[j];
                if qr != 0.0 {
                    for l in 0..k {
                        g[(j, l)] += qr * row[l];
                    }
                }
            }
        }
    }
    for k in 0..n {
        let idx = nlp.u_index(k);
        g[(k, k)] += hdiag[idx] + reg;
        a[k] += grad[idx];
    }
    if relaxed {
        for k in 0..n {
            g[(n + k, n + k)] = 1.0;
            a[n + k] = nlp.settings.slack_penalty;
        }
    }

    let m = nlp.ineqs.len() + if relaxed { n } else { 0 };
    let mut cmat = DMatrix::<f64>::zeros(m, nv);
    let mut rhs = DVector::<f64>::zeros(m);
    let u_start = nlp.u_index(0);
    for (r, q) in nlp.ineqs.iter().enumerate() {
        let sign = q.sign();
        if q.var >= u_start {
            let k = q.var - u_start;
            cmat[(r, k)] = -sign;
            rhs[r] = sign * (w[q.var] - q.bound);
        } else {
            let k = q.stage;
            let comp = q.var % NX;
            let row = &cond.sens[k][comp * n..comp * n + k];
            for j in 0..k {
                cmat[(r, j)] = -sign * row[j];
            }
            rhs[r] = sign * (w[q.var] + cond.offset[k][comp] - q.bound);
            if relaxed && q.lane {
                cmat[(r, n + k - 1)] = 1.0;
            }
        }
    }
    if relaxed {
        for k in 0..n {
            let r = nlp.ineqs.len() + k;
            cmat[(r, n + k)] = 1.0;
        }
    }
    DenseQp { hessian: g, linear: a, constraints: cmat, rhs }
}

/// Objective plus exact penalties; lane rows carry the slack penalty
/// instead of the ℓ1 penalty in relaxed mode.
fn merit(nlp: &NlpInstance, w: &[f64], nu: f64, relaxed: bool) -> Result<f64, OcpError> {
    let mut infeas = 0.0;
    let x0 = nlp.state(w, 0);
    for i in 0..NX {
        infeas += (nlp.s0[i] - x0[i]).abs();
    }
    for k in 0..nlp.horizon {
        let xk = VehicleState::from_array(&nlp.state(w, k));
        let next = step_rk4(&xk, w[nlp.u_index(k)], &nlp.vehicle, &ConstCurvature(nlp.kappa[k]), nlp.dt)?
            .to_array();
        let xk1 = nlp.state(w, k + 1);
        for i in 0..NX {
            infeas += (next[i] - xk1[i]).abs();
        }
    }
    for q in &nlp.ineqs {
        if relaxed && q.lane {
            continue;
        }
        infeas += q.eval(w[q.var]).max(0.0);
    }
    Ok(nlp.objective(w) + nu * infeas + if relaxed { slack_cost(nlp, w) } else { 0.0 })
}

fn slack_cost(nlp: &NlpInstance, w: &[f64]) -> f64 {
    let rho = nlp.settings.slack_penalty;
    nlp.lane_slacks(w).iter().map(|s| rho * s + 0.5 * s * s).sum()
}

fn initial_guess(nlp: &NlpInstance, warm: Option<&PrimalDualSolution>) -> (Vec<f64>, Vec<f64>) {
    let n = nlp.horizon;
    let m = nlp.num_ineqs();
    if let Some(ws) = warm.filter(|ws| ws.u.len() == n && ws.x.len() == n + 1 && ws.mu.len() == m) {
        let mut x = ws.x.clone();
        x[0] = nlp.s0;
        let u: Vec<f64> = ws.u.iter().map(|v| nlp.bounds.delta_rate.clamp(*v)).collect();
        return (nlp.pack(&x, &u), ws.mu.iter().map(|v| v.max(0.0)).collect());
    }
    let u = vec![0.0; n];
    let x = nlp.simulate(&u).unwrap_or_else(|_| {
        (0..=n)
            .map(|k| {
                let mut s = nlp.s0;
                s[SIGMA] += k as f64 * nlp.vehicle.v_x * nlp.dt;
                s
            })
            .collect()
    });
    (nlp.pack(&x, &u), vec![0.0; m])
}

fn assemble(
    nlp: &NlpInstance,
    w: &[f64],
    lambda: Vec<StateVec>,
    mu: Vec<f64>,
    relaxed: bool,
    residual: f64,
    converged: bool,
    mut stats: SolverStats,
) -> PrimalDualSolution {
    let n = nlp.horizon;
    let x = (0..=n).map(|k| nlp.state(w, k)).collect();
    let u = w[nlp.u_index(0)..].to_vec();
    let active: Vec<bool> = mu.iter().map(|m| *m > ACTIVE_EPS).collect();
    stats.kkt_residual = residual;
    stats.active_set_size = active.iter().filter(|a| **a).count();
    stats.relaxed = relaxed;
    PrimalDualSolution { x, u, lambda, mu, active, relaxed, kkt_residual: residual, converged, stats }
}

const LOCAL_RESIDUAL: f64 = 1e-3;

fn trial_residual(nlp: &NlpInstance, w: &[f64], mu: &[f64], relaxed: bool) -> Option<f64> {
    let lin = linearize(nlp, w).ok()?;
    let grad = nlp.objective_gradient(w);
    let lambda = costates(nlp, &grad, mu, &lin);
    Some(kkt_parts(nlp, w, &lambda, mu, relaxed, &lin).max())
}

/// Solves one transcribed instance. A warm start is used as-is (shift it
/// beforehand for receding-horizon use).
pub fn solve(nlp: &NlpInstance, warm: Option<&PrimalDualSolution>) -> Result<PrimalDualSolution, OcpError> {
    let n = nlp.horizon;
    let (mut w, mut mu) = initial_guess(nlp, warm);
    let hdiag = nlp.objective_hessian_diag();
    let mut relaxed = false;
    let mut nu = 1.0_f64;
    let mut stats = SolverStats::default();
    let mut best: Option<(f64, PrimalDualSolution)> = None;

    loop {
        let lin = linearize(nlp, &w)?;
        let grad = nlp.objective_gradient(&w);
        let lambda = costates(nlp, &grad, &mu, &lin);
        let residual = kkt_parts(nlp, &w, &lambda, &mu, relaxed, &lin).max();
        if residual <= nlp.settings.tol {
            return Ok(assemble(nlp, &w, lambda, mu, relaxed, residual, true, stats));
        }
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            let snap = assemble(nlp, &w, lambda.clone(), mu.clone(), relaxed, residual, false, stats.clone());
            best = Some((residual, snap));
        }
        if stats.iterations >= nlp.settings.max_iter {
            let (residual, best) = best.expect("recorded above");
            return Err(OcpError::MaxIterations { iterations: stats.iterations, residual, best: Box::new(best) });
        }
        stats.iterations += 1;

        let c = defects(nlp, &w, &lin);
        let cond = condense(nlp, &lin, &c);
        let qp_sol = loop {
            let qp = build_qp(nlp, &w, &grad, &hdiag, &cond, relaxed);
            match qp::solve(&qp) {
                Ok(s) => break s,
                Err(QpError::Infeasible) if !relaxed => {
                    log::debug!("QP infeasible; switching lane rows to slack relaxation");
                    relaxed = true;
                }
                Err(QpError::Infeasible) => return Err(OcpError::Infeasible),
                Err(e) => return Err(OcpError::InvalidSpec(e.to_string())),
            }
        };
        stats.qp_iterations += qp_sol.iterations;

        // expand the step
        let mut dw = vec![0.0; w.len()];
        let mut dx = c[0];
        for k in 0..=n {
            for i in 0..NX {
                dw[nlp.x_index(k, i)] = dx[i];
            }
            if k < n {
                let du = qp_sol.x[k];
                dw[nlp.u_index(k)] = du;
                let a = &lin.a[k];
                let mut next = [0.0; NX];
                for i in 0..NX {
                    let mut acc = lin.b[k][i] * du + c[k + 1][i];
                    for l in 0..NX {
                        acc += a[i][l] * dx[l];
                    }
                    next[i] = acc;
                }
                dx = next;
            }
        }
        let mu_qp: Vec<f64> = (0..nlp.num_ineqs()).map(|i| qp_sol.multipliers[i].max(0.0)).collect();

        // QP multipliers for the penalty parameter
        let mut grad_model = grad.clone();
        for (j, g) in grad_model.iter_mut().enumerate() {
            *g += (hdiag[j] + nlp.settings.regularization) * dw[j];
        }
        let lam_qp = costates(nlp, &grad_model, &mu_qp, &lin);
        let mut mult_max = mu_qp
            .iter()
            .zip(&nlp.ineqs)
            .filter(|(_, q)| !(relaxed && q.lane))
            .fold(0.0_f64, |m, (v, _)| m.max(*v));
        for l in &lam_qp {
            for v in l {
                mult_max = mult_max.max(v.abs());
            }
        }
        nu = nu.max(1.1 * mult_max + 1e-3);

        // ℓ1 merit line search
        let phi0 = merit(nlp, &w, nu, relaxed)?;
        let mut infeas = c.iter().flat_map(|v| v.iter()).map(|v| v.abs()).sum::<f64>();
        for q in &nlp.ineqs {
            if !(relaxed && q.lane) {
                infeas += q.eval(w[q.var]).max(0.0);
            }
        }
        let full: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + b).collect();
        let mut dphi = grad.iter().zip(&dw).map(|(g, d)| g * d).sum::<f64>() - nu * infeas;
        if relaxed {
            dphi += slack_cost(nlp, &full) - slack_cost(nlp, &w);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut monotone = true;
        if dphi >= -1e-14 * (1.0 + phi0.abs()) {
            accepted = Some((full, merit(nlp, &w, nu, relaxed).unwrap_or(phi0)));
        } else {
            // near the solution, take the full step when it contracts the
            // KKT residual even if constraint curvature raises the merit
            let noise = 64.0 * f64::EPSILON * (1.0 + phi0.abs());
            if residual < LOCAL_RESIDUAL {
                if let (Ok(phi), Some(r)) = (merit(nlp, &full, nu, relaxed), trial_residual(nlp, &full, &mu_qp, relaxed)) {
                    if phi <= phi0 + 1e-4 * dphi + noise || r <= 0.5 * residual {
                        monotone = phi <= phi0 + noise;
                        accepted = Some((full.clone(), phi));
                    }
                }
            }
            while accepted.is_none() && alpha > 1e-10 {
                let trial: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + alpha * b).collect();
                if let Ok(phi) = merit(nlp, &trial, nu, relaxed) {
                    if phi <= phi0 + 1e-4 * alpha * dphi + noise {
                        accepted = Some((trial, phi));
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }
        let Some((trial, phi)) = accepted else {
            let (residual, best) = best.expect("recorded above");
            return Err(OcpError::MaxIterations { iterations: stats.iterations, residual, best: Box::new(best) });
        };
        if monotone {
            stats.merit_steps.push((phi0, phi));
        }
        stats.step_sizes.push(alpha);
        w = trial;
        for (m, q) in mu.iter_mut().zip(&mu_qp) {
            *m += alpha * (q - *m);
        }
    }
}

/// Receding-horizon MPC instance holding its own warm start.
#[derive(Debug, Clone)]
pub struct Mpc {
    spec: OcpSpec,
    warm: Option<(NlpInstance, PrimalDualSolution)>,
}

impl Mpc {
    pub fn new(spec: OcpSpec) -> Self {
        Self { spec, warm: None }
    }

    pub fn spec(&self) -> &OcpSpec {
        &self.spec
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Solves for `s0` with the given cost, reading curvature at the arc
    /// positions predicted by the shifted previous solution.
    pub fn solve(&mut self, s0: &VehicleState, weights: CostWeights) -> Result<(NlpInstance, PrimalDualSolution), OcpError> {
        let shifted = self.warm.as_ref().map(|(nlp, sol)| sol.shifted(nlp));
        let sigmas: Vec<f64> = match &shifted {
            Some(ws) => {
                let mut s = NlpInstance::sigmas(&ws.x);
                s[0] = s0.sigma;
                s
            }
            None => (0..self.spec.horizon)
                .map(|k| s0.sigma + k as f64 * self.spec.vehicle.v_x * self.spec.dt)
                .collect(),
        };
        let nlp = NlpInstance::build(&self.spec, s0, weights, &sigmas)?;
        match solve(&nlp, shifted.as_ref()) {
            Ok(sol) => {
                self.warm = Some((nlp.clone(), sol.clone()));
                Ok((nlp, sol))
            }
            Err(e) => {
                self.warm = None;
                Err(e)
            }
        }
    }
}

/// Solves the MPC for `s0` and returns the first control with the full
/// solution. `warm` is used as given.
pub fn mpc_control(
    spec: &OcpSpec,
    s0: &VehicleState,
    theta: &Theta,
    warm: Option<&PrimalDualSolution>,
) -> Result<(f64, PrimalDualSolution), OcpError> {
    let nlp = match warm {
        Some(ws) if ws.x.len() == spec.horizon + 1 => {
            let mut s = NlpInstance::sigmas(&ws.x);
            s[0] = s0.sigma;
            NlpInstance::with_predicted_sigma(spec, s0, theta, &s)?
        }
        _ => super::transcribe(spec, s0, theta)?,
    };
    let sol = solve(&nlp, warm)?;
    Ok((sol.u0(), sol))
}
