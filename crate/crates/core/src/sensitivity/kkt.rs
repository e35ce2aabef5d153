use std::fmt::Write as _;

use crate::ocp::{
    defects, linearize, stationarity, NlpInstance, OcpError, PrimalDualSolution, Theta, COST_PARAMS,
};
use crate::vehicle::{step_contracted_hessian, NX};

use super::banded::BandMatrix;
use super::SensitivityError;

/// Multiplier threshold separating active from inactive rows.
pub const EPS_ACT: f64 = 1e-6;

/// Reported condition estimates above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Role of an inequality row in the implicit system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowClass {
    /// `h_i = 0` enforced.
    Active,
    /// `−μ_i = 0` enforced.
    Inactive,
    /// Relaxed lane row with positive slack: `μ_i − ρ − h_i = 0`.
    Elastic,
}

/// Implicit KKT system `F(z, θ, s) = 0` at a primal–dual solution, with
/// `z = (w, λ, μ)` laid out as `w` (primal), then `λ_0..λ_N`, then one `μ`
/// per inequality row. Rows follow the same layout (stationarity,
/// equalities, inequality rows).
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub residual: Vec<f64>,
    /// `∂F/∂z` as `(row, col, value)` triplets (duplicates are summed).
    pub dfdz: Vec<(usize, usize, f64)>,
    /// `∂F/∂(cost weights)`, one sparse column per [`CostWeights`] entry.
    pub dfdweights: [Vec<(usize, f64)>; COST_PARAMS],
    pub classes: Vec<RowClass>,
    pub theta: Theta,
    num_primal: usize,
    num_eq: usize,
    horizon: usize,
    u0_index: usize,
    /// `(var, sign)` of each inequality row.
    rows: Vec<(usize, f64)>,
}

impl KktSystem {
    pub fn dim(&self) -> usize {
        self.num_primal + self.num_eq + self.rows.len()
    }

    pub fn num_primal(&self) -> usize {
        self.num_primal
    }

    pub fn num_equalities(&self) -> usize {
        self.num_eq
    }

    pub fn num_active(&self) -> usize {
        self.classes.iter().filter(|c| **c == RowClass::Active).count()
    }

    /// Index of `u_0` in `z`.
    pub fn u0_index(&self) -> usize {
        self.u0_index
    }

    pub fn residual_norm(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `∂F/∂s`: identity on the `x_0 = s` rows.
    pub fn dfds(&self) -> Vec<(usize, usize, f64)> {
        (0..NX).map(|i| (self.num_primal + i, i, 1.0)).collect()
    }

    /// Plain-text triplet dump of `∂F/∂z` (`row col value`, 0-based).
    pub fn to_triplet_text(&self) -> String {
        let mut out = format!("# dim {}\n", self.dim());
        for (i, j, v) in &self.dfdz {
            let _ = writeln!(out, "{i} {j} {v:.17e}");
        }
        out
    }

    /// Unknowns kept in the reduced system, stage-interleaved for a narrow
    /// band: `λ_k, x_k, μ(x_k), u_k, μ(u_k)`.
    fn reduced_order(&self) -> Vec<usize> {
        let n = self.horizon;
        let p = self.num_primal;
        let mut by_var: Vec<Vec<usize>> = vec![Vec::new(); p];
        for (i, &(var, _)) in self.rows.iter().enumerate() {
            if self.classes[i] == RowClass::Active {
                by_var[var].push(p + self.num_eq + i);
            }
        }
        let mut order = Vec::with_capacity(p + self.num_eq + self.num_active());
        for k in 0..=n {
            order.extend((0..NX).map(|i| p + NX * k + i));
            order.extend((0..NX).map(|i| NX * k + i));
            for i in 0..NX {
                order.extend(&by_var[NX * k + i]);
            }
            if k < n {
                let iu = NX * (n + 1) + k;
                order.push(iu);
                order.extend(&by_var[iu]);
            }
        }
        order
    }

    /// Solves `(∂F/∂z)ᵀ y = z̄` and returns
    /// `θ̄ = −(∂F/∂θ)ᵀ y` and `s̄ = −(∂F/∂s)ᵀ y`.
    ///
    /// Inactive rows are eliminated exactly (their multipliers are locally
    /// constant) and elastic rows are condensed into the Hessian.
    pub fn adjoint_vjp(&self, zbar: &[f64]) -> Result<Adjoint, SensitivityError> {
        assert_eq!(zbar.len(), self.dim(), "cotangent length");
        let order = self.reduced_order();
        let mut pos = vec![usize::MAX; self.dim()];
        for (r, &i) in order.iter().enumerate() {
            pos[i] = r;
        }
        let m = order.len();
        let mut entries = Vec::with_capacity(self.dfdz.len());
        for &(i, j, v) in &self.dfdz {
            let (ri, rj) = (pos[i], pos[j]);
            if ri != usize::MAX && rj != usize::MAX {
                entries.push((ri, rj, v));
            }
        }
        let mut rhs = vec![0.0; m];
        for (r, &i) in order.iter().enumerate() {
            rhs[r] = zbar[i];
        }
        let mu0 = self.num_primal + self.num_eq;
        for (i, &(var, sign)) in self.rows.iter().enumerate() {
            if self.classes[i] == RowClass::Elastic {
                entries.push((pos[var], pos[var], sign * sign));
                rhs[pos[var]] += sign * zbar[mu0 + i];
            }
        }
        let band = BandMatrix::from_triplets(m, &entries);
        let norm = band.norm1();
        let lu = band.factor().map_err(|_| SensitivityError::SingularKkt { condition: f64::INFINITY })?;
        let condition = norm * lu.inverse_norm1_estimate();
        if !(condition <= MAX_CONDITION) {
            return Err(SensitivityError::SingularKkt { condition });
        }
        lu.solve_transposed(&mut rhs);
        let mut y = vec![0.0; self.dim()];
        for (r, &i) in order.iter().enumerate() {
            y[i] = rhs[r];
        }
        let mut weights_bar = [0.0; COST_PARAMS];
        for (c, col) in self.dfdweights.iter().enumerate() {
            weights_bar[c] = -col.iter().map(|&(row, v)| v * y[row]).sum::<f64>();
        }
        let s_bar = std::array::from_fn(|i| -y[self.num_primal + i]);
        Ok(Adjoint { theta_bar: self.theta.pull_back(&weights_bar), weights_bar, s_bar, condition })
    }
}

/// Result of one adjoint solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoint {
    /// Gradient over the projected parameters of the instance.
    pub theta_bar: Vec<f64>,
    /// Gradient over the general [`CostWeights`].
    pub weights_bar: [f64; COST_PARAMS],
    pub s_bar: [f64; NX],
    /// 1-norm condition estimate of the reduced system.
    pub condition: f64,
}

fn classify(nlp: &NlpInstance, sol: &PrimalDualSolution, w: &[f64]) -> Vec<RowClass> {
    let slacks = if sol.relaxed { nlp.lane_slacks(w) } else { vec![0.0; nlp.horizon] };
    let mut weak = 0;
    let classes = nlp
        .ineqs
        .iter()
        .zip(&sol.mu)
        .map(|(q, &m)| {
            let h = q.eval(w[q.var]);
            if sol.relaxed && q.lane && slacks[q.stage - 1] > 0.0 && h > 0.0 {
                RowClass::Elastic
            } else if m > EPS_ACT {
                RowClass::Active
            } else {
                if h.abs() < EPS_ACT {
                    weak += 1;
                }
                RowClass::Inactive
            }
        })
        .collect();
    if weak > 0 {
        log::warn!("{weak} weakly active constraint(s) classified inactive");
    }
    classes
}

/// Assembles the implicit KKT system at a solution of `nlp`. The Hessian
/// holds the exact cost curvature plus `λ_{k+1}ᵀ∇²φ_k` of every shooting
/// step; the solver's Levenberg term is not included.
pub fn build_kkt_system(sol: &PrimalDualSolution, nlp: &NlpInstance, theta: &Theta) -> Result<KktSystem, SensitivityError> {
    if !sol.converged {
        return Err(SensitivityError::NotConverged);
    }
    let n = nlp.horizon;
    let p = nlp.num_primal();
    let e = nlp.num_equalities();
    let w = nlp.pack(&sol.x, &sol.u);
    let lin = linearize(nlp, &w).map_err(SensitivityError::Ocp)?;
    let classes = classify(nlp, sol, &w);
    let rho = nlp.settings.slack_penalty;

    let mut residual = stationarity(nlp, &w, &sol.lambda, &sol.mu, &lin);
    for c in defects(nlp, &w, &lin) {
        residual.extend_from_slice(&c);
    }
    for ((q, &m), class) in nlp.ineqs.iter().zip(&sol.mu).zip(&classes) {
        let h = q.eval(w[q.var]);
        residual.push(match class {
            RowClass::Active => h,
            RowClass::Inactive => -m,
            RowClass::Elastic => m - rho - h,
        });
    }

    let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(16 * p);
    // Hessian of the Lagrangian
    for (i, v) in nlp.objective_hessian_diag().into_iter().enumerate() {
        if v != 0.0 {
            t.push((i, i, v));
        }
    }
    for k in 0..n {
        let hk = step_contracted_hessian(
            &sol.x[k],
            sol.u[k],
            &nlp.vehicle,
            &crate::track::ConstCurvature(nlp.kappa[k]),
            nlp.dt,
            &sol.lambda[k + 1],
        )
        .map_err(|err| SensitivityError::Ocp(OcpError::Vehicle(err)))?;
        let idx = |a: usize| if a < NX { nlp.x_index(k, a) } else { nlp.u_index(k) };
        for a in 0..=NX {
            for b in 0..=NX {
                if hk[a][b] != 0.0 {
                    t.push((idx(a), idx(b), hk[a][b]));
                }
            }
        }
    }
    // equality Jacobian G and its transpose
    let push_sym = |t: &mut Vec<(usize, usize, f64)>, row: usize, col: usize, v: f64| {
        if v != 0.0 {
            t.push((p + row, col, v));
            t.push((col, p + row, v));
        }
    };
    for i in 0..NX {
        push_sym(&mut t, i, nlp.x_index(0, i), -1.0);
    }
    for k in 0..n {
        for r in 0..NX {
            let row = NX * (k + 1) + r;
            for j in 0..NX {
                push_sym(&mut t, row, nlp.x_index(k, j), lin.a[k][r][j]);
            }
            push_sym(&mut t, row, nlp.u_index(k), lin.b[k][r]);
            push_sym(&mut t, row, nlp.x_index(k + 1, r), -1.0);
        }
    }
    // inequality rows and multiplier columns
    let mut rows = Vec::with_capacity(nlp.ineqs.len());
    for (i, (q, class)) in nlp.ineqs.iter().zip(&classes).enumerate() {
        let r = p + e + i;
        let sign = q.sign();
        t.push((q.var, r, sign));
        match class {
            RowClass::Active => t.push((r, q.var, sign)),
            RowClass::Inactive => t.push((r, r, -1.0)),
            RowClass::Elastic => {
                t.push((r, r, 1.0));
                t.push((r, q.var, -sign));
            }
        }
        rows.push((q.var, sign));
    }

    Ok(KktSystem {
        residual,
        dfdz: t,
        dfdweights: nlp.gradient_weight_jacobian(&w),
        classes,
        theta: *theta,
        num_primal: p,
        num_eq: e,
        horizon: n,
        u0_index: nlp.u_index(0),
        rows,
    })
}

/// Free-function form of [`KktSystem::adjoint_vjp`].
pub fn adjoint_vjp(kkt: &KktSystem, zbar: &[f64]) -> Result<Adjoint, SensitivityError> {
    kkt.adjoint_vjp(zbar)
}

/// Gradients of the first control: `∂u_0/∂θ` (one entry per projected
/// parameter) and `∂u_0/∂s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyJacobians {
    pub du0_dtheta: Vec<f64>,
    pub du0_dweights: [f64; COST_PARAMS],
    pub du0_ds: [f64; NX],
    pub condition: f64,
}

pub fn policy_jacobians(sol: &PrimalDualSolution, nlp: &NlpInstance, theta: &Theta) -> Result<PolicyJacobians, SensitivityError> {
    let kkt = build_kkt_system(sol, nlp, theta)?;
    let mut zbar = vec![0.0; kkt.dim()];
    zbar[kkt.u0_index()] = 1.0;
    let adj = kkt.adjoint_vjp(&zbar)?;
    Ok(PolicyJacobians {
        du0_dtheta: adj.theta_bar,
        du0_dweights: adj.weights_bar,
        du0_ds: adj.s_bar,
        condition: adj.condition,
    })
}
