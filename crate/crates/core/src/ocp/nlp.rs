use crate::track::ConstCurvature;
use crate::vehicle::{
    step_with_jacobians, Mat6, StateVec, VehicleParams, VehicleState, D, DELTA, NX, SIGMA, THETA, VY,
    YAW_RATE,
};

use super::{Bounds, CostWeights, OcpError, OcpSpec, PrimalDualSolution, SolverSettings, Theta};

/// Box constraint `h(w) ≤ 0` on a single decision variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ineq {
    /// Index into the primal vector `w = (x_0..x_N, u_0..u_{N-1})`.
    pub var: usize,
    pub stage: usize,
    pub upper: bool,
    pub bound: f64,
    /// Lane-boundary row (eligible for slack relaxation).
    pub lane: bool,
}

impl Ineq {
    /// `+1` for an upper bound, `-1` for a lower bound: `h = sign·(w − bound)`.
    #[inline]
    pub fn sign(&self) -> f64 {
        if self.upper {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub fn eval(&self, value: f64) -> f64 {
        self.sign() * (value - self.bound)
    }
}

/// One transcribed MPC instance: fixed initial state, per-stage curvature
/// and cost weights.
#[derive(Debug, Clone)]
pub struct NlpInstance {
    pub horizon: usize,
    pub dt: f64,
    pub vehicle: VehicleParams,
    pub bounds: Bounds,
    pub half_width: f64,
    pub s0: StateVec,
    /// Curvature held fixed over stage k (length N).
    pub kappa: Vec<f64>,
    pub weights: CostWeights,
    pub ineqs: Vec<Ineq>,
    pub settings: SolverSettings,
}

/// Transcribes the MPC with cold-start curvature prediction (σ advancing at
/// v_x). Use [`NlpInstance::with_predicted_sigma`] to read κ along a
/// warm-start trajectory instead.
pub fn transcribe(spec: &OcpSpec, s0: &VehicleState, theta: &Theta) -> Result<NlpInstance, OcpError> {
    spec.validate()?;
    if theta.variant() != spec.cost_variant {
        return Err(OcpError::InvalidSpec(format!(
            "theta variant {:?} does not match spec variant {:?}",
            theta.variant(),
            spec.cost_variant
        )));
    }
    let sigmas: Vec<f64> =
        (0..spec.horizon).map(|k| s0.sigma + k as f64 * spec.vehicle.v_x * spec.dt).collect();
    NlpInstance::build(spec, s0, theta.weights(), &sigmas)
}

impl NlpInstance {
    pub(crate) fn build(
        spec: &OcpSpec,
        s0: &VehicleState,
        weights: CostWeights,
        sigmas: &[f64],
    ) -> Result<Self, OcpError> {
        spec.validate()?;
        weights.validate()?;
        let half = spec.half_width();
        let limit = half + spec.solver.relax_margin;
        if !(s0.d.abs() < limit) {
            return Err(OcpError::StartOutsideLane { d: s0.d.abs(), limit });
        }
        let n = spec.horizon;
        let kappa = sigmas.iter().take(n).map(|&s| spec.track.curvature_at(s)).collect();
        let mut nlp = NlpInstance {
            horizon: n,
            dt: spec.dt,
            vehicle: spec.vehicle,
            bounds: spec.bounds,
            half_width: half,
            s0: s0.to_array(),
            kappa,
            weights,
            ineqs: Vec::new(),
            settings: spec.solver,
        };
        nlp.ineqs = nlp.enumerate_ineqs();
        Ok(nlp)
    }

    /// Same problem with curvature read at the given per-stage arc positions.
    pub fn with_predicted_sigma(spec: &OcpSpec, s0: &VehicleState, theta: &Theta, sigmas: &[f64]) -> Result<Self, OcpError> {
        if theta.variant() != spec.cost_variant {
            return Err(OcpError::InvalidSpec("theta variant does not match spec".into()));
        }
        Self::build(spec, s0, theta.weights(), sigmas)
    }

    /// Instance with an explicit general cost (both variants are special cases).
    pub fn with_weights(spec: &OcpSpec, s0: &VehicleState, weights: CostWeights) -> Result<Self, OcpError> {
        let sigmas: Vec<f64> =
            (0..spec.horizon).map(|k| s0.sigma + k as f64 * spec.vehicle.v_x * spec.dt).collect();
        Self::build(spec, s0, weights, &sigmas)
    }

    fn enumerate_ineqs(&self) -> Vec<Ineq> {
        let n = self.horizon;
        let mut out = Vec::with_capacity(8 * n + 2 * n);
        let b = self.bounds;
        let state_boxes = [
            (D, -self.half_width, self.half_width, true),
            (DELTA, b.delta.lower, b.delta.upper, false),
            (VY, b.v_y.lower, b.v_y.upper, false),
            (YAW_RATE, b.yaw_rate.lower, b.yaw_rate.upper, false),
        ];
        // x_0 is pinned to the measured state, so boxes start at stage 1
        for k in 1..=n {
            for &(comp, lo, hi, lane) in &state_boxes {
                let var = self.x_index(k, comp);
                out.push(Ineq { var, stage: k, upper: true, bound: hi, lane });
                out.push(Ineq { var, stage: k, upper: false, bound: lo, lane });
            }
        }
        for k in 0..n {
            let var = self.u_index(k);
            out.push(Ineq { var, stage: k, upper: true, bound: b.delta_rate.upper, lane: false });
            out.push(Ineq { var, stage: k, upper: false, bound: b.delta_rate.lower, lane: false });
        }
        out
    }

    /// Row that row `i` copies from when the horizon is shifted by one stage
    /// (the last stage duplicates itself). Rows are laid out as 8 state-box
    /// rows per stage 1..N followed by 2 control rows per stage 0..N−1.
    pub fn shifted_row(&self, i: usize) -> usize {
        let n = self.horizon;
        let state_rows = 8 * n;
        if i < state_rows {
            let (stage, slot) = (i / 8 + 1, i % 8);
            let src = (stage + 1).min(n);
            (src - 1) * 8 + slot
        } else {
            let (stage, slot) = ((i - state_rows) / 2, (i - state_rows) % 2);
            let src = (stage + 1).min(n - 1);
            state_rows + 2 * src + slot
        }
    }

    #[inline]
    pub fn x_index(&self, k: usize, comp: usize) -> usize {
        NX * k + comp
    }

    #[inline]
    pub fn u_index(&self, k: usize) -> usize {
        NX * (self.horizon + 1) + k
    }

    pub fn num_primal(&self) -> usize {
        NX * (self.horizon + 1) + self.horizon
    }

    pub fn num_equalities(&self) -> usize {
        NX * (self.horizon + 1)
    }

    pub fn num_ineqs(&self) -> usize {
        self.ineqs.len()
    }

    /// Flattens a primal trajectory into `w`.
    pub fn pack(&self, x: &[StateVec], u: &[f64]) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.num_primal());
        for xk in x {
            w.extend_from_slice(xk);
        }
        w.extend_from_slice(u);
        w
    }

    pub fn state(&self, w: &[f64], k: usize) -> StateVec {
        let mut s = [0.0; NX];
        s.copy_from_slice(&w[NX * k..NX * (k + 1)]);
        s
    }

    pub(crate) fn stage_curvature(&self, k: usize) -> ConstCurvature {
        ConstCurvature(self.kappa[k])
    }

    /// Shooting map of stage k with its Jacobians.
    pub fn stage_step(&self, k: usize, x: &StateVec, u: f64) -> Result<(StateVec, Mat6, StateVec), OcpError> {
        Ok(step_with_jacobians(x, u, &self.vehicle, &self.stage_curvature(k), self.dt)?)
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let n = self.horizon;
        let c = &self.weights;
        let mut f = 0.0;
        for k in 0..n {
            let dk = w[self.x_index(k, D)] - c.d_bar;
            let th = w[self.x_index(k, THETA)];
            let uk = w[self.u_index(k)];
            f += c.stage_d * dk * dk + c.stage_theta * th * th + c.stage_rate * uk * uk;
        }
        let dn = w[self.x_index(n, D)] - c.d_bar;
        f + c.terminal_d * dn * dn
    }

    pub fn objective_gradient(&self, w: &[f64]) -> Vec<f64> {
        let n = self.horizon;
        let c = &self.weights;
        let mut g = vec![0.0; self.num_primal()];
        for k in 0..n {
            g[self.x_index(k, D)] = 2.0 * c.stage_d * (w[self.x_index(k, D)] - c.d_bar);
            g[self.x_index(k, THETA)] = 2.0 * c.stage_theta * w[self.x_index(k, THETA)];
            g[self.u_index(k)] = 2.0 * c.stage_rate * w[self.u_index(k)];
        }
        g[self.x_index(n, D)] = 2.0 * c.terminal_d * (w[self.x_index(n, D)] - c.d_bar);
        g
    }

    /// Diagonal of the (constant) cost Hessian.
    pub fn objective_hessian_diag(&self) -> Vec<f64> {
        let n = self.horizon;
        let c = &self.weights;
        let mut h = vec![0.0; self.num_primal()];
        for k in 0..n {
            h[self.x_index(k, D)] = 2.0 * c.stage_d;
            h[self.x_index(k, THETA)] = 2.0 * c.stage_theta;
            h[self.u_index(k)] = 2.0 * c.stage_rate;
        }
        h[self.x_index(n, D)] = 2.0 * c.terminal_d;
        h
    }

    /// ∂(∇_w f)/∂(cost weights), as 5 sparse columns `(row, value)`.
    pub fn gradient_weight_jacobian(&self, w: &[f64]) -> [Vec<(usize, f64)>; 5] {
        let n = self.horizon;
        let c = &self.weights;
        let mut cols: [Vec<(usize, f64)>; 5] = Default::default();
        for k in 0..n {
            let id = self.x_index(k, D);
            let it = self.x_index(k, THETA);
            let iu = self.u_index(k);
            cols[0].push((id, 2.0 * (w[id] - c.d_bar)));
            cols[1].push((it, 2.0 * w[it]));
            cols[2].push((iu, 2.0 * w[iu]));
            cols[4].push((id, -2.0 * c.stage_d));
        }
        let idn = self.x_index(n, D);
        cols[3].push((idn, 2.0 * (w[idn] - c.d_bar)));
        cols[4].push((idn, -2.0 * c.terminal_d));
        cols
    }

    pub fn ineq_values(&self, w: &[f64]) -> Vec<f64> {
        self.ineqs.iter().map(|q| q.eval(w[q.var])).collect()
    }

    /// Lane slack per stage `s_k = max(h_up, h_lo, 0)` (index k−1 for stages 1..N).
    pub fn lane_slacks(&self, w: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0_f64; self.horizon];
        for q in self.ineqs.iter().filter(|q| q.lane) {
            let v = q.eval(w[q.var]);
            let slot = &mut s[q.stage - 1];
            *slot = slot.max(v);
        }
        s
    }

    /// Simulates the model with the given controls (stage curvatures fixed).
    pub fn simulate(&self, u: &[f64]) -> Result<Vec<StateVec>, OcpError> {
        let mut x = Vec::with_capacity(self.horizon + 1);
        x.push(self.s0);
        for k in 0..self.horizon {
            let (next, _, _) = self.stage_step(k, &x[k], u[k])?;
            x.push(next);
        }
        Ok(x)
    }

    /// Arc positions of a trajectory, used for curvature prediction.
    pub fn sigmas(x: &[StateVec]) -> Vec<f64> {
        x.iter().map(|s| s[SIGMA]).collect()
    }
}

pub(crate) struct Linearization {
    pub next: Vec<StateVec>,
    pub a: Vec<Mat6>,
    pub b: Vec<StateVec>,
}

pub(crate) fn linearize(nlp: &NlpInstance, w: &[f64]) -> Result<Linearization, OcpError> {
    let n = nlp.horizon;
    let mut lin = Linearization {
        next: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
    };
    for k in 0..n {
        let (nx, a, b) = nlp.stage_step(k, &nlp.state(w, k), w[nlp.u_index(k)])?;
        lin.next.push(nx);
        lin.a.push(a);
        lin.b.push(b);
    }
    Ok(lin)
}

/// Equality residuals `c_0 = s0 − x_0`, `c_{k+1} = φ_k(x_k, u_k) − x_{k+1}`.
pub(crate) fn defects(nlp: &NlpInstance, w: &[f64], lin: &Linearization) -> Vec<StateVec> {
    let mut c = Vec::with_capacity(nlp.horizon + 1);
    let x0 = nlp.state(w, 0);
    c.push(std::array::from_fn(|i| nlp.s0[i] - x0[i]));
    for k in 0..nlp.horizon {
        let xk1 = nlp.state(w, k + 1);
        c.push(std::array::from_fn(|i| lin.next[k][i] - xk1[i]));
    }
    c
}

/// Costate recursion making stationarity w.r.t. every x_k exact:
/// `λ_k = ∇_{x_k} f + A_kᵀ λ_{k+1} + Σ μ ∇h`.
pub(crate) fn costates(nlp: &NlpInstance, grad: &[f64], mu: &[f64], lin: &Linearization) -> Vec<StateVec> {
    let n = nlp.horizon;
    let mut ineq_term = vec![0.0; nlp.num_primal()];
    for (q, m) in nlp.ineqs.iter().zip(mu) {
        ineq_term[q.var] += q.sign() * m;
    }
    let mut lam = vec![[0.0; NX]; n + 1];
    for k in (0..=n).rev() {
        let mut l = [0.0; NX];
        for i in 0..NX {
            let idx = nlp.x_index(k, i);
            l[i] = grad[idx] + ineq_term[idx];
        }
        if k < n {
            let a = &lin.a[k];
            for j in 0..NX {
                let mut acc = 0.0;
                for i in 0..NX {
                    acc += a[i][j] * lam[k + 1][i];
                }
                l[j] += acc;
            }
        }
        lam[k] = l;
    }
    lam
}

/// Components of the KKT residual (each an ∞-norm).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktParts {
    pub stationarity: f64,
    pub equality: f64,
    pub inequality: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktParts {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.equality)
            .max(self.inequality)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Gradient of the Lagrangian
/// `f + μᵀh + λ_0ᵀ(s0 − x_0) + Σ λ_{k+1}ᵀ(φ_k(x_k, u_k) − x_{k+1})` over `w`.
pub(crate) fn stationarity(
    nlp: &NlpInstance,
    w: &[f64],
    lambda: &[StateVec],
    mu: &[f64],
    lin: &Linearization,
) -> Vec<f64> {
    let n = nlp.horizon;
    let grad = nlp.objective_gradient(w);
    let mut stat = grad;
    for (q, m) in nlp.ineqs.iter().zip(mu) {
        stat[q.var] += q.sign() * m;
    }
    for k in 0..=n {
        for i in 0..NX {
            stat[nlp.x_index(k, i)] -= lambda[k][i];
        }
        if k < n {
            let a = &lin.a[k];
            let b = &lin.b[k];
            for j in 0..NX {
                let mut acc = 0.0;
                for i in 0..NX {
                    acc += a[i][j] * lambda[k + 1][i];
                }
                stat[nlp.x_index(k, j)] += acc;
            }
            stat[nlp.u_index(k)] += (0..NX).map(|i| b[i] * lambda[k + 1][i]).sum::<f64>();
        }
    }
    stat
}

pub(crate) fn kkt_parts(
    nlp: &NlpInstance,
    w: &[f64],
    lambda: &[StateVec],
    mu: &[f64],
    relaxed: bool,
    lin: &Linearization,
) -> KktParts {
    let n = nlp.horizon;
    let stat = stationarity(nlp, w, lambda, mu, lin);
    let mut parts = KktParts {
        stationarity: stat.iter().fold(0.0, |m, v| m.max(v.abs())),
        ..Default::default()
    };
    for c in defects(nlp, w, lin) {
        for v in c {
            parts.equality = parts.equality.max(v.abs());
        }
    }
    let slacks = if relaxed { nlp.lane_slacks(w) } else { vec![0.0; n] };
    let rho = nlp.settings.slack_penalty;
    let mut lane_mu = vec![0.0; n];
    for (q, &m) in nlp.ineqs.iter().zip(mu) {
        let s = if relaxed && q.lane { slacks[q.stage - 1] } else { 0.0 };
        let h = q.eval(w[q.var]) - s;
        parts.inequality = parts.inequality.max(h.max(0.0));
        parts.dual = parts.dual.max((-m).max(0.0));
        parts.complementarity = parts.complementarity.max((m * h).abs());
        if q.lane {
            lane_mu[q.stage - 1] += m;
        }
    }
    if relaxed {
        // stationarity of ρ s + ½ s² with respect to the slack
        for (s, m) in slacks.iter().zip(&lane_mu) {
            let r = if *s > 0.0 { (rho + s - m).abs() } else { (m - rho).max(0.0) };
            parts.stationarity = parts.stationarity.max(r);
        }
    }
    parts
}

/// ∞-norm KKT residual of a primal–dual point (stationarity, equality
/// residuals, inequality violation, negative multipliers, complementarity).
pub fn kkt_residual(z: &PrimalDualSolution, nlp: &NlpInstance) -> f64 {
    let w = nlp.pack(&z.x, &z.u);
    match linearize(nlp, &w) {
        Ok(lin) => kkt_parts(nlp, &w, &z.lambda, &z.mu, z.relaxed, &lin).max(),
        Err(_) => f64::INFINITY,
    }
}
