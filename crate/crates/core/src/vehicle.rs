//! Frenet-frame lane-keeping model: linear single-track lateral dynamics,
//! road-relative kinematics and a δ̇ steering integrator, discretized with
//! classical RK4.
//!
//! State ordering is `(v_y, ψ̇, σ, d, θ_e, δ)`; the control is the steering
//! rate δ̇. Jacobians treat κ(σ) as locally constant (∂κ/∂σ = 0).

use std::path::Path;

use thiserror::Error;

use crate::scalar::{Dual, Real};
use crate::track::CurvatureSource;

pub const NX: usize = 6;
pub const VY: usize = 0;
pub const YAW_RATE: usize = 1;
pub const SIGMA: usize = 2;
pub const D: usize = 3;
pub const THETA: usize = 4;
pub const DELTA: usize = 5;

/// Default sample time, seconds.
pub const DEFAULT_DT: f64 = 0.1;
/// Minimum admissible value of 1 − κd.
pub const SINGULARITY_EPS: f64 = 1e-6;

pub type StateVec = [f64; NX];
pub type Mat6 = [[f64; NX]; NX];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("Frenet singularity: 1 - kappa*d = {margin:.3e} (kappa={kappa}, d={d})")]
    Singularity { kappa: f64, d: f64, margin: f64 },
    #[error("invalid vehicle parameter {name} = {value}")]
    BadParam { name: &'static str, value: f64 },
    #[error("vehicle config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub v_y: f64,
    pub psi_dot: f64,
    pub sigma: f64,
    pub d: f64,
    pub theta_e: f64,
    pub delta: f64,
}

impl VehicleState {
    pub fn new(v_y: f64, psi_dot: f64, sigma: f64, d: f64, theta_e: f64, delta: f64) -> Self {
        Self { v_y, psi_dot, sigma, d, theta_e, delta }
    }

    /// Vehicle on the centerline at arc `sigma`, aligned with the road.
    pub fn centered(sigma: f64) -> Self {
        Self { sigma, ..Self::default() }
    }

    pub fn to_array(&self) -> StateVec {
        [self.v_y, self.psi_dot, self.sigma, self.d, self.theta_e, self.delta]
    }

    pub fn from_array(a: &StateVec) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    /// Left-right mirror image (σ unchanged).
    pub fn mirrored(&self) -> Self {
        Self::new(-self.v_y, -self.psi_dot, self.sigma, -self.d, -self.theta_e, -self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub cornering_stiffness_front: f64,
    pub cornering_stiffness_rear: f64,
    /// CG to front axle, m.
    pub dist_cg_front: f64,
    /// CG to rear axle, m.
    pub dist_cg_rear: f64,
    /// Constant longitudinal speed, m/s.
    pub v_x: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1380.0,
            yaw_inertia: 2420.0,
            cornering_stiffness_front: 1.2e5,
            cornering_stiffness_rear: 1.0e5,
            dist_cg_front: 1.05,
            dist_cg_rear: 1.61,
            v_x: 50.0 / 3.6,
        }
    }
}

/// Coefficients of the linear lateral block
/// `[v̇_y, ψ̈]ᵀ = A [v_y, ψ̇]ᵀ + b δ`.
#[derive(Debug, Clone, Copy)]
pub struct BicycleCoeffs {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub b1: f64,
    pub b2: f64,
}

const PARAM_KEYS: [&str; 7] = [
    "mass",
    "yaw_inertia",
    "cornering_stiffness_front",
    "cornering_stiffness_rear",
    "dist_cg_front",
    "dist_cg_rear",
    "v_x",
];

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        for (name, value) in PARAM_KEYS.iter().zip(self.values()) {
            if !(value > 0.0) || !value.is_finite() {
                return Err(VehicleError::BadParam { name, value });
            }
        }
        Ok(())
    }

    fn values(&self) -> [f64; 7] {
        [
            self.mass,
            self.yaw_inertia,
            self.cornering_stiffness_front,
            self.cornering_stiffness_rear,
            self.dist_cg_front,
            self.dist_cg_rear,
            self.v_x,
        ]
    }

    pub fn bicycle(&self) -> BicycleCoeffs {
        let (m, iz, cf, cr) =
            (self.mass, self.yaw_inertia, self.cornering_stiffness_front, self.cornering_stiffness_rear);
        let (a, b, vx) = (self.dist_cg_front, self.dist_cg_rear, self.v_x);
        BicycleCoeffs {
            a11: -(cf + cr) / (m * vx),
            a12: -vx + (cr * b - cf * a) / (m * vx),
            a21: (cr * b - cf * a) / (iz * vx),
            a22: -(cf * a * a + cr * b * b) / (iz * vx),
            b1: cf / m,
            b2: cf * a / iz,
        }
    }

    /// Key–value text form (`key = value` per line, `#` comments).
    pub fn to_text(&self) -> String {
        PARAM_KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses a key–value config; unspecified keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self, VehicleError> {
        let mut p = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| VehicleError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got '{line}'"),
            })?;
            let value: f64 = v.trim().parse().map_err(|e| VehicleError::Parse {
                line: i + 1,
                msg: format!("bad number '{}': {e}", v.trim()),
            })?;
            let slot = match k.trim() {
                "mass" => &mut p.mass,
                "yaw_inertia" => &mut p.yaw_inertia,
                "cornering_stiffness_front" => &mut p.cornering_stiffness_front,
                "cornering_stiffness_rear" => &mut p.cornering_stiffness_rear,
                "dist_cg_front" => &mut p.dist_cg_front,
                "dist_cg_rear" => &mut p.dist_cg_rear,
                "v_x" => &mut p.v_x,
                other => {
                    return Err(VehicleError::Parse { line: i + 1, msg: format!("unknown key '{other}'") })
                }
            };
            *slot = value;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VehicleError> {
        let text = std::fs::read_to_string(path).map_err(|e| VehicleError::Io(e.to_string()))?;
        Self::from_text(&text)
    }
}

/// Lateral acceleration `a_y = v̇_y + v_x ψ̇` of the single-track model.
pub fn lateral_accel(x: &VehicleState, p: &VehicleParams) -> f64 {
    let c = p.bicycle();
    let vy_dot = c.a11 * x.v_y + c.a12 * x.psi_dot + c.b1 * x.delta;
    vy_dot + p.v_x * x.psi_dot
}

fn check_singularity(kappa: f64, d: f64) -> Result<f64, VehicleError> {
    let margin = 1.0 - kappa * d;
    if margin <= SINGULARITY_EPS {
        Err(VehicleError::Singularity { kappa, d, margin })
    } else {
        Ok(margin)
    }
}

pub(crate) fn rhs<T: Real>(
    x: &[T; NX],
    u: T,
    c: &BicycleCoeffs,
    vx: f64,
    kappa: f64,
) -> Result<[T; NX], VehicleError> {
    check_singularity(kappa, x[D].value())?;
    let (vy, r, d, th, delta) = (x[VY], x[YAW_RATE], x[D], x[THETA], x[DELTA]);
    let (s, co) = (th.sin(), th.cos());
    let g = T::cst(1.0) - d.scale(kappa);
    let sigma_dot = (co.scale(vx) - vy * s) / g;
    Ok([
        vy.scale(c.a11) + r.scale(c.a12) + delta.scale(c.b1),
        vy.scale(c.a21) + r.scale(c.a22) + delta.scale(c.b2),
        sigma_dot,
        s.scale(vx) - vy * co,
        r - sigma_dot.scale(kappa),
        u,
    ])
}

/// ∂f/∂x of the continuous dynamics (∂f/∂u is the unit vector on δ).
pub(crate) fn rhs_jacobian<T: Real>(
    x: &[T; NX],
    c: &BicycleCoeffs,
    vx: f64,
    kappa: f64,
) -> [[T; NX]; NX] {
    let z = T::cst(0.0);
    let (vy, d, th) = (x[VY], x[D], x[THETA]);
    let (s, co) = (th.sin(), th.cos());
    let g = T::cst(1.0) - d.scale(kappa);
    let num = co.scale(vx) - vy * s;
    let ds_dvy = -s / g;
    let ds_dd = num.scale(kappa) / (g * g);
    let ds_dth = (-s.scale(vx) - vy * co) / g;
    let mut j = [[z; NX]; NX];
    j[VY][VY] = T::cst(c.a11);
    j[VY][YAW_RATE] = T::cst(c.a12);
    j[VY][DELTA] = T::cst(c.b1);
    j[YAW_RATE][VY] = T::cst(c.a21);
    j[YAW_RATE][YAW_RATE] = T::cst(c.a22);
    j[YAW_RATE][DELTA] = T::cst(c.b2);
    j[SIGMA][VY] = ds_dvy;
    j[SIGMA][D] = ds_dd;
    j[SIGMA][THETA] = ds_dth;
    j[D][VY] = -co;
    j[D][THETA] = co.scale(vx) + vy * s;
    j[THETA][YAW_RATE] = T::cst(1.0);
    j[THETA][VY] = -ds_dvy.scale(kappa);
    j[THETA][D] = -ds_dd.scale(kappa);
    j[THETA][THETA] = -ds_dth.scale(kappa);
    j
}

fn axpy<T: Real>(x: &[T; NX], h: f64, k: &[T; NX]) -> [T; NX] {
    std::array::from_fn(|i| x[i] + k[i].scale(h))
}

fn matmul<T: Real>(a: &[[T; NX]; NX], b: &[[T; NX]; NX]) -> [[T; NX]; NX] {
    let mut out = [[T::cst(0.0); NX]; NX];
    for i in 0..NX {
        for k in 0..NX {
            let aik = a[i][k];
            for j in 0..NX {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn matvec<T: Real>(a: &[[T; NX]; NX], v: &[T; NX]) -> [T; NX] {
    std::array::from_fn(|i| {
        let mut acc = T::cst(0.0);
        for j in 0..NX {
            acc += a[i][j] * v[j];
        }
        acc
    })
}

/// One RK4 step together with its exact Jacobians, generic over the scalar.
/// Curvature is read per stage at the stage's σ.
pub(crate) fn rk4_with_jacobians<T: Real, C: CurvatureSource + ?Sized>(
    x: &[T; NX],
    u: T,
    p: &VehicleParams,
    curv: &C,
    dt: f64,
) -> Result<([T; NX], [[T; NX]; NX], [T; NX]), VehicleError> {
    let c = p.bicycle();
    let vx = p.v_x;
    let zero = T::cst(0.0);
    let mut ident = [[zero; NX]; NX];
    for (i, row) in ident.iter_mut().enumerate() {
        row[i] = T::cst(1.0);
    }
    let mut e_u = [zero; NX];
    e_u[DELTA] = T::cst(1.0);

    let mut ks: [[T; NX]; 4] = [[zero; NX]; 4];
    let mut dks_dx: [[[T; NX]; NX]; 4] = [[[zero; NX]; NX]; 4];
    let mut dks_du: [[T; NX]; 4] = [[zero; NX]; 4];
    let coeffs = [0.0, 0.5 * dt, 0.5 * dt, dt];

    for stage in 0..4 {
        let (xs, dxs_dx, dxs_du) = if stage == 0 {
            (*x, ident, [zero; NX])
        } else {
            let h = coeffs[stage];
            let prev = stage - 1;
            let xs = axpy(x, h, &ks[prev]);
            let mut dxs_dx = ident;
            for i in 0..NX {
                for j in 0..NX {
                    dxs_dx[i][j] += dks_dx[prev][i][j].scale(h);
                }
            }
            let dxs_du: [T; NX] = std::array::from_fn(|i| dks_du[prev][i].scale(h));
            (xs, dxs_dx, dxs_du)
        };
        let kappa = curv.kappa(xs[SIGMA].value());
        ks[stage] = rhs(&xs, u, &c, vx, kappa)?;
        let jf = rhs_jacobian(&xs, &c, vx, kappa);
        dks_dx[stage] = matmul(&jf, &dxs_dx);
        let mut du = matvec(&jf, &dxs_du);
        for i in 0..NX {
            du[i] += e_u[i];
        }
        dks_du[stage] = du;
    }

    let w = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
    let mut next = *x;
    let mut a = ident;
    let mut b = [zero; NX];
    for s in 0..4 {
        for i in 0..NX {
            next[i] += ks[s][i].scale(w[s]);
            b[i] += dks_du[s][i].scale(w[s]);
            for j in 0..NX {
                a[i][j] += dks_dx[s][i][j].scale(w[s]);
            }
        }
    }
    Ok((next, a, b))
}

/// Continuous-time state derivative.
pub fn dynamics_continuous(
    x: &VehicleState,
    u: f64,
    p: &VehicleParams,
    kappa: f64,
) -> Result<VehicleState, VehicleError> {
    let dx = rhs(&x.to_array(), u, &p.bicycle(), p.v_x, kappa)?;
    Ok(VehicleState::from_array(&dx))
}

/// Classical RK4 step with curvature sampled at each stage.
pub fn step_rk4<C: CurvatureSource + ?Sized>(
    x: &VehicleState,
    u: f64,
    p: &VehicleParams,
    track: &C,
    dt: f64,
) -> Result<VehicleState, VehicleError> {
    let c = p.bicycle();
    let x0 = x.to_array();
    let k1 = rhs(&x0, u, &c, p.v_x, track.kappa(x0[SIGMA]))?;
    let x2 = axpy(&x0, 0.5 * dt, &k1);
    let k2 = rhs(&x2, u, &c, p.v_x, track.kappa(x2[SIGMA]))?;
    let x3 = axpy(&x0, 0.5 * dt, &k2);
    let k3 = rhs(&x3, u, &c, p.v_x, track.kappa(x3[SIGMA]))?;
    let x4 = axpy(&x0, dt, &k3);
    let k4 = rhs(&x4, u, &c, p.v_x, track.kappa(x4[SIGMA]))?;
    let next: StateVec =
        std::array::from_fn(|i| x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    Ok(VehicleState::from_array(&next))
}

/// Exact Jacobians `(∂x⁺/∂x, ∂x⁺/∂u)` of [`step_rk4`].
pub fn step_jacobians<C: CurvatureSource + ?Sized>(
    x: &VehicleState,
    u: f64,
    p: &VehicleParams,
    track: &C,
    dt: f64,
) -> Result<(Mat6, StateVec), VehicleError> {
    let (_, a, b) = rk4_with_jacobians(&x.to_array(), u, p, track, dt)?;
    Ok((a, b))
}

/// Step, state Jacobian and control Jacobian in one pass.
pub fn step_with_jacobians<C: CurvatureSource + ?Sized>(
    x: &StateVec,
    u: f64,
    p: &VehicleParams,
    track: &C,
    dt: f64,
) -> Result<(StateVec, Mat6, StateVec), VehicleError> {
    rk4_with_jacobians(x, u, p, track, dt)
}

/// Hessian of `λᵀ x⁺(x, u)` with respect to `(x, u)` (7×7, u last),
/// obtained by forward-mode differentiation of the exact Jacobians.
pub fn step_contracted_hessian<C: CurvatureSource + ?Sized>(
    x: &StateVec,
    u: f64,
    p: &VehicleParams,
    curv: &C,
    dt: f64,
    lambda: &StateVec,
) -> Result<[[f64; NX + 1]; NX + 1], VehicleError> {
    let mut h = [[0.0; NX + 1]; NX + 1];
    for j in 0..=NX {
        let xd: [Dual; NX] = std::array::from_fn(|i| Dual::new(x[i], if i == j { 1.0 } else { 0.0 }));
        let ud = Dual::new(u, if j == NX { 1.0 } else { 0.0 });
        let (_, a, b) = rk4_with_jacobians(&xd, ud, p, curv, dt)?;
        for col in 0..NX {
            let mut acc = 0.0;
            for (row, l) in lambda.iter().enumerate() {
                acc += a[row][col].eps * l;
            }
            h[col][j] = acc;
        }
        h[NX][j] = lambda.iter().zip(b.iter()).map(|(l, bv)| l * bv.eps).sum();
    }
    // symmetrize away rounding asymmetry
    for i in 0..=NX {
        for j in (i + 1)..=NX {
            let m = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = m;
            h[j][i] = m;
        }
    }
    Ok(h)
}
