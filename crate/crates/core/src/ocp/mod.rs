//! Parametric lane-keeping MPC: multiple-shooting transcription and an SQP
//! solver returning primal–dual solutions with identified active sets.

mod nlp;
pub mod qp;
mod sqp;

use std::sync::Arc;

use thiserror::Error;

use crate::track::TrackSpec;
use crate::vehicle::{VehicleError, VehicleParams, DEFAULT_DT};

pub use nlp::{kkt_residual, transcribe, Ineq, NlpInstance};
pub use sqp::{mpc_control, solve, Mpc, PrimalDualSolution, SolverStats, ACTIVE_EPS};

pub(crate) use nlp::{defects, linearize, stationarity};

/// Number of entries in [`CostWeights`].
pub const COST_PARAMS: usize = 5;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid OCP spec: {0}")]
    InvalidSpec(String),
    #[error("initial state outside the lane relaxation region: |d| = {d} > {limit}")]
    StartOutsideLane { d: f64, limit: f64 },
    #[error("QP subproblem infeasible even with lane relaxation")]
    Infeasible,
    #[error("SQP stopped after {iterations} iterations (kkt residual {residual:.3e})")]
    MaxIterations { iterations: usize, residual: f64, best: Box<PrimalDualSolution> },
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

impl OcpError {
    /// Best iterate carried by a max-iterations failure.
    pub fn best_iterate(&self) -> Option<&PrimalDualSolution> {
        match self {
            OcpError::MaxIterations { best, .. } => Some(best),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn symmetric(limit: f64) -> Self {
        Self { lower: -limit, upper: limit }
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lower - tol && v <= self.upper + tol
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

/// Box limits beyond the lane constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub v_y: Interval,
    pub yaw_rate: Interval,
    pub delta: Interval,
    pub delta_rate: Interval,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            v_y: Interval::symmetric(5.0),
            yaw_rate: Interval::symmetric(1.5),
            delta: Interval::symmetric(0.5),
            delta_rate: Interval::symmetric(0.8),
        }
    }
}

impl Bounds {
    fn validate(&self) -> Result<(), OcpError> {
        for (name, iv) in [
            ("v_y", self.v_y),
            ("yaw_rate", self.yaw_rate),
            ("delta", self.delta),
            ("delta_rate", self.delta_rate),
        ] {
            if !(iv.lower < iv.upper) || !iv.lower.is_finite() || !iv.upper.is_finite() {
                return Err(OcpError::InvalidSpec(format!(
                    "bound {name}: lower {} must be below upper {}",
                    iv.lower, iv.upper
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostVariant {
    /// Stage cost `W_d (d−d̄)² + W_θ θ² + W_δ̇ δ̇²`, no terminal cost.
    D1Stage,
    /// Stage cost `θ² + δ̇²` plus terminal `(d_N − d̄)²`.
    D2Terminal,
}

/// General quadratic lane-keeping cost. Both cost variants are special cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub stage_d: f64,
    pub stage_theta: f64,
    pub stage_rate: f64,
    pub terminal_d: f64,
    pub d_bar: f64,
}

impl CostWeights {
    pub fn to_array(&self) -> [f64; COST_PARAMS] {
        [self.stage_d, self.stage_theta, self.stage_rate, self.terminal_d, self.d_bar]
    }

    /// All weights multiplied by `c` (offset unchanged).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            stage_d: self.stage_d * c,
            stage_theta: self.stage_theta * c,
            stage_rate: self.stage_rate * c,
            terminal_d: self.terminal_d * c,
            d_bar: self.d_bar,
        }
    }

    fn validate(&self) -> Result<(), OcpError> {
        let w = [self.stage_d, self.stage_theta, self.stage_rate, self.terminal_d];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || !self.d_bar.is_finite() {
            return Err(OcpError::InvalidSpec(format!("invalid cost weights {self:?}")));
        }
        if self.stage_rate <= 0.0 {
            return Err(OcpError::InvalidSpec("steering-rate weight must be positive".into()));
        }
        Ok(())
    }
}

/// MPC-facing (projected) cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Theta {
    Stage { w_d: f64, w_theta: f64, w_rate: f64, d_bar: f64 },
    Terminal { d_bar: f64 },
}

impl Theta {
    pub fn variant(&self) -> CostVariant {
        match self {
            Theta::Stage { .. } => CostVariant::D1Stage,
            Theta::Terminal { .. } => CostVariant::D2Terminal,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Theta::Stage { .. } => 4,
            Theta::Terminal { .. } => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            Theta::Stage { w_d, w_theta, w_rate, d_bar } => vec![w_d, w_theta, w_rate, d_bar],
            Theta::Terminal { d_bar } => vec![d_bar],
        }
    }

    pub fn from_slice(variant: CostVariant, v: &[f64]) -> Self {
        match variant {
            CostVariant::D1Stage => Theta::Stage { w_d: v[0], w_theta: v[1], w_rate: v[2], d_bar: v[3] },
            CostVariant::D2Terminal => Theta::Terminal { d_bar: v[0] },
        }
    }

    pub fn d_bar(&self) -> f64 {
        match *self {
            Theta::Stage { d_bar, .. } | Theta::Terminal { d_bar } => d_bar,
        }
    }

    pub fn weights(&self) -> CostWeights {
        match *self {
            Theta::Stage { w_d, w_theta, w_rate, d_bar } => {
                CostWeights { stage_d: w_d, stage_theta: w_theta, stage_rate: w_rate, terminal_d: 0.0, d_bar }
            }
            Theta::Terminal { d_bar } => {
                CostWeights { stage_d: 0.0, stage_theta: 1.0, stage_rate: 1.0, terminal_d: 1.0, d_bar }
            }
        }
    }

    /// Maps a gradient over [`CostWeights`] onto this parameterization.
    pub fn pull_back(&self, g: &[f64; COST_PARAMS]) -> Vec<f64> {
        match self {
            Theta::Stage { .. } => vec![g[0], g[1], g[2], g[4]],
            Theta::Terminal { .. } => vec![g[4]],
        }
    }
}

/// Numerical settings of the SQP solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// KKT residual tolerance (∞-norm).
    pub tol: f64,
    pub max_iter: usize,
    /// Levenberg term added to the primal Hessian of each QP.
    pub regularization: f64,
    /// ℓ1 penalty on lane-constraint slack in relaxed mode.
    pub slack_penalty: f64,
    /// Extra room beyond w/2 within which an initial state is still accepted.
    pub relax_margin: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 50, regularization: 1e-6, slack_penalty: 1e4, relax_margin: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub horizon: usize,
    pub dt: f64,
    pub cost_variant: CostVariant,
    pub bounds: Bounds,
    pub lane_width: f64,
    pub vehicle: VehicleParams,
    pub track: Arc<TrackSpec>,
    pub solver: SolverSettings,
}

impl OcpSpec {
    /// Defaults: N = 20, dt = 0.1 s, lane width from the track.
    pub fn new(track: Arc<TrackSpec>, cost_variant: CostVariant) -> Self {
        Self {
            horizon: 20,
            dt: DEFAULT_DT,
            cost_variant,
            bounds: Bounds::default(),
            lane_width: track.lane_width(),
            vehicle: VehicleParams::default(),
            track,
            solver: SolverSettings::default(),
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.solver.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        if self.horizon < 2 {
            return Err(OcpError::InvalidSpec(format!("horizon {} < 2", self.horizon)));
        }
        if !(self.dt > 0.0) {
            return Err(OcpError::InvalidSpec(format!("dt {} must be positive", self.dt)));
        }
        if !(self.lane_width > 0.0) {
            return Err(OcpError::InvalidSpec(format!("lane width {} must be positive", self.lane_width)));
        }
        self.bounds.validate()?;
        self.vehicle.validate()?;
        Ok(())
    }

    pub fn half_width(&self) -> f64 {
        self.lane_width / 2.0
    }

    /// Number of primal decision variables `6(N+1) + N`.
    pub fn num_primal(&self) -> usize {
        6 * (self.horizon + 1) + self.horizon
    }

    /// Number of equality rows `6(N+1)`.
    pub fn num_equalities(&self) -> usize {
        6 * (self.horizon + 1)
    }
}

#[cfg(test)]
mod tests;
