//! Policies mapping a vehicle state and curvature preview to a steering
//! rate: hierarchical MPC policies (static D1 weights or a d̄ network for
//! D2) and the pure-network baseline.

mod checkpoint;
mod mlp;
mod projection;

use std::sync::Arc;

use thiserror::Error;

use crate::ocp::{CostVariant, Interval, Mpc, OcpError, OcpSpec, PrimalDualSolution, Theta};
use crate::sensitivity::{policy_jacobians, SensitivityError};
use crate::track::{Preview, TrackSpec, PREVIEW_LEN};
use crate::vehicle::{StateVec, VehicleState, NX};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{Mlp, MlpTape};
pub use projection::{project_static, sigmoid, softplus, softplus_inv, StaticRawParams};

/// Curvature inputs are multiplied by this before entering a network.
pub const KAPPA_INPUT_SCALE: f64 = 100.0;
pub const DBAR_NET_SIZES: [usize; 4] = [PREVIEW_LEN, 50, 50, 1];
pub const BASELINE_SIZES: [usize; 4] = [NX + PREVIEW_LEN, 32, 32, 1];
pub const BASELINE_OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Solver(#[from] OcpError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("tape does not match the network it is replayed on")]
    StaleTape,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint line {line}: {msg}")]
    CheckpointLine { line: usize, msg: String },
}

/// `∂a/∂s` and `∂a/∂(raw parameters)` of one action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrads {
    pub ds: StateVec,
    pub dparams: Vec<f64>,
}

/// Per-step MPC diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub converged: bool,
    pub iterations: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub active_count: usize,
    pub relaxed: bool,
    /// Indices of active inequality rows.
    pub active_rows: Vec<usize>,
    /// Predicted lateral offsets over the horizon.
    pub predicted_d: Vec<f64>,
}

impl SolverTrace {
    fn from_solution(sol: &PrimalDualSolution) -> Self {
        Self {
            converged: sol.converged,
            iterations: sol.stats.iterations,
            qp_iterations: sol.stats.qp_iterations,
            kkt_residual: sol.kkt_residual,
            active_count: sol.active_count(),
            relaxed: sol.relaxed,
            active_rows: sol.active.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i).collect(),
            predicted_d: sol.x.iter().map(|x| x[crate::vehicle::D]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub action: f64,
    /// Present when gradients were requested and could be formed.
    pub grads: Option<ActionGrads>,
    pub solver: Option<SolverTrace>,
    /// Cost parameters handed to the MPC, if any.
    pub theta: Option<Theta>,
}

/// A differentiable closed-loop policy `a = π(s, χ; params)`.
pub trait Policy {
    fn kind(&self) -> &'static str;
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);
    /// Clears internal state (MPC warm start) before a new rollout.
    fn reset(&mut self) {}
    fn act(&mut self, s: &VehicleState, chi: &Preview, want_grads: bool) -> Result<PolicyOutput, PolicyError>;
    fn checkpoint(&self) -> Checkpoint;
}

/// Indirect controller `χ ↦ d̄`: 7→50→50→1 rectifier network on scaled
/// curvatures followed by `(w/2)·tanh` (or the identity without squash).
#[derive(Debug, Clone, PartialEq)]
pub struct DbarNet {
    pub mlp: Mlp,
    pub half_width: f64,
    pub squash: bool,
}

#[derive(Debug, Clone)]
pub struct DbarTape {
    mlp: MlpTape,
    /// `∂d̄/∂(network output)`.
    scale: f64,
}

impl DbarNet {
    pub fn random(lane_width: f64, squash: bool, seed: u64) -> Self {
        Self { mlp: Mlp::random(&DBAR_NET_SIZES, seed), half_width: lane_width / 2.0, squash }
    }

    pub fn zeros(lane_width: f64, squash: bool) -> Self {
        Self { mlp: Mlp::zeros(&DBAR_NET_SIZES), half_width: lane_width / 2.0, squash }
    }

    pub fn forward(&self, chi: &Preview) -> (f64, DbarTape) {
        let input: Vec<f64> = chi.iter().map(|k| k * KAPPA_INPUT_SCALE).collect();
        let (out, tape) = self.mlp.forward(&input);
        if self.squash {
            let t = out.tanh();
            (self.half_width * t, DbarTape { mlp: tape, scale: self.half_width * (1.0 - t * t) })
        } else {
            (out, DbarTape { mlp: tape, scale: 1.0 })
        }
    }

    /// Gradient of `cotangent · d̄` over the network parameters.
    pub fn backward(&self, tape: &DbarTape, cotangent: f64) -> Result<Vec<f64>, PolicyError> {
        Ok(self.mlp.backward(&tape.mlp, cotangent * tape.scale)?.0)
    }
}

#[derive(Debug, Clone)]
pub enum Indirect {
    Static(StaticRawParams),
    Net(DbarNet),
}

/// MPC whose cost parameters come from a static projection (D1) or from
/// the curvature preview through a [`DbarNet`] (D2).
#[derive(Debug, Clone)]
pub struct HierarchicalPolicy {
    mpc: Mpc,
    pub indirect: Indirect,
}

enum ProjectionTape {
    Static([f64; 4]),
    Net(DbarTape),
}

impl HierarchicalPolicy {
    pub fn static_d1(mut spec: OcpSpec, raw: StaticRawParams) -> Self {
        spec.cost_variant = CostVariant::D1Stage;
        Self { mpc: Mpc::new(spec), indirect: Indirect::Static(raw) }
    }

    pub fn mlp_d2(mut spec: OcpSpec, net: DbarNet) -> Self {
        spec.cost_variant = CostVariant::D2Terminal;
        Self { mpc: Mpc::new(spec), indirect: Indirect::Net(net) }
    }

    pub fn spec(&self) -> &OcpSpec {
        self.mpc.spec()
    }

    /// Cost parameters the MPC would receive for this preview.
    pub fn theta(&self, chi: &Preview) -> Theta {
        self.theta_with_tape(chi).0
    }

    fn theta_with_tape(&self, chi: &Preview) -> (Theta, ProjectionTape) {
        match &self.indirect {
            Indirect::Static(raw) => {
                let (theta, jac) = project_static(raw, self.mpc.spec().lane_width);
                (theta, ProjectionTape::Static(jac))
            }
            Indirect::Net(net) => {
                let (d_bar, tape) = net.forward(chi);
                (Theta::Terminal { d_bar }, ProjectionTape::Net(tape))
            }
        }
    }
}

impl Policy for HierarchicalPolicy {
    fn kind(&self) -> &'static str {
        match self.indirect {
            Indirect::Static(_) => "static-d1",
            Indirect::Net(_) => "mlp-d2",
        }
    }

    fn num_params(&self) -> usize {
        match &self.indirect {
            Indirect::Static(_) => 4,
            Indirect::Net(n) => n.mlp.num_params(),
        }
    }

    fn params(&self) -> Vec<f64> {
        match &self.indirect {
            Indirect::Static(r) => r.raw.to_vec(),
            Indirect::Net(n) => n.mlp.params().to_vec(),
        }
    }

    fn set_params(&mut self, p: &[f64]) {
        match &mut self.indirect {
            Indirect::Static(r) => r.raw.copy_from_slice(p),
            Indirect::Net(n) => n.mlp.params_mut().copy_from_slice(p),
        }
    }

    fn reset(&mut self) {
        self.mpc.reset();
    }

    fn act(&mut self, s: &VehicleState, chi: &Preview, want_grads: bool) -> Result<PolicyOutput, PolicyError> {
        let (theta, proj) = self.theta_with_tape(chi);
        let (nlp, sol) = self.mpc.solve(s, theta.weights())?;
        let grads = if want_grads {
            match policy_jacobians(&sol, &nlp, &theta) {
                Ok(j) => {
                    let dparams = match (&proj, &self.indirect) {
                        (ProjectionTape::Static(jac), _) => (0..4).map(|i| j.du0_dtheta[i] * jac[i]).collect(),
                        (ProjectionTape::Net(tape), Indirect::Net(net)) => net.backward(tape, j.du0_dtheta[0])?,
                        _ => unreachable!("tape matches parameterization"),
                    };
                    Some(ActionGrads { ds: j.du0_ds, dparams })
                }
                Err(e) => {
                    log::warn!("policy gradient unavailable: {e}");
                    None
                }
            }
        } else {
            None
        };
        Ok(PolicyOutput { action: sol.u0(), grads, solver: Some(SolverTrace::from_solution(&sol)), theta: Some(theta) })
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::with_kind(self.kind());
        c.set("lane_width", self.mpc.spec().lane_width);
        match &self.indirect {
            Indirect::Static(r) => c.arrays.push(("raw".into(), r.raw.to_vec())),
            Indirect::Net(n) => {
                c.set("squash", n.squash);
                c.arrays.extend(n.mlp.named_blocks());
            }
        }
        c
    }
}

/// Pure feedforward policy on the scaled state and curvature preview,
/// squashed into the steering-rate box.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePolicy {
    pub mlp: Mlp,
    pub rate: Interval,
    pub half_width: f64,
    pub track_length: f64,
}

impl BaselinePolicy {
    /// Uniform initialization with the output layer scaled by
    /// [`BASELINE_OUTPUT_INIT_SCALE`], so the untrained policy commands
    /// nearly the middle of the rate box.
    pub fn random(track: &TrackSpec, rate: Interval, seed: u64) -> Self {
        let mut mlp = Mlp::random(&BASELINE_SIZES, seed);
        let n = mlp.num_params();
        let last = BASELINE_SIZES[BASELINE_SIZES.len() - 2] + 1;
        for v in &mut mlp.params_mut()[n - last..] {
            *v *= BASELINE_OUTPUT_INIT_SCALE;
        }
        Self { mlp, rate, half_width: track.half_width(), track_length: track.total_length() }
    }

    pub fn zeros(track: &TrackSpec, rate: Interval) -> Self {
        Self { mlp: Mlp::zeros(&BASELINE_SIZES), rate, half_width: track.half_width(), track_length: track.total_length() }
    }

    /// `∂feature/∂state` (diagonal) for the state part of the input.
    fn state_scale(&self) -> StateVec {
        [1.0, 1.0, 1.0 / self.track_length, 1.0 / self.half_width, 1.0, 1.0]
    }

    fn features(&self, s: &VehicleState, chi: &Preview) -> Vec<f64> {
        let scale = self.state_scale();
        let mut x = s.to_array();
        x[crate::vehicle::SIGMA] = s.sigma.rem_euclid(self.track_length);
        let mut f: Vec<f64> = x.iter().zip(&scale).map(|(v, c)| v * c).collect();
        f.extend(chi.iter().map(|k| k * KAPPA_INPUT_SCALE));
        f
    }
}

impl Policy for BaselinePolicy {
    fn kind(&self) -> &'static str {
        "baseline"
    }

    fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.mlp.params().to_vec()
    }

    fn set_params(&mut self, p: &[f64]) {
        self.mlp.params_mut().copy_from_slice(p);
    }

    fn act(&mut self, s: &VehicleState, chi: &Preview, want_grads: bool) -> Result<PolicyOutput, PolicyError> {
        let (out, tape) = self.mlp.forward(&self.features(s, chi));
        let mid = 0.5 * (self.rate.upper + self.rate.lower);
        let half = 0.5 * (self.rate.upper - self.rate.lower);
        let t = out.tanh();
        let action = mid + half * t;
        let grads = if want_grads {
            let (gp, gx) = self.mlp.backward(&tape, half * (1.0 - t * t))?;
            let scale = self.state_scale();
            Some(ActionGrads { ds: std::array::from_fn(|i| gx[i] * scale[i]), dparams: gp })
        } else {
            None
        };
        Ok(PolicyOutput { action, grads, solver: None, theta: None })
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::with_kind(self.kind());
        c.set("lane_width", 2.0 * self.half_width);
        c.set("track_length", self.track_length);
        c.set("rate_lower", self.rate.lower);
        c.set("rate_upper", self.rate.upper);
        c.arrays.extend(self.mlp.named_blocks());
        c
    }
}

/// Rebuilds a policy from a checkpoint. MPC policies use default solver
/// settings on the given track.
pub fn policy_from_checkpoint(ckpt: &Checkpoint, track: Arc<TrackSpec>) -> Result<Box<dyn Policy>, PolicyError> {
    let kind = ckpt.kind().ok_or_else(|| PolicyError::Checkpoint("missing kind".into()))?;
    match kind {
        "static-d1" => {
            let raw = ckpt.array("raw")?;
            let raw: [f64; 4] =
                raw.try_into().map_err(|_| PolicyError::Checkpoint("array raw must have 4 values".into()))?;
            let spec = OcpSpec::new(track, CostVariant::D1Stage);
            Ok(Box::new(HierarchicalPolicy::static_d1(spec, StaticRawParams { raw })))
        }
        "mlp-d2" => {
            let squash = ckpt.meta.get("squash").map(|v| v != "false").unwrap_or(true);
            let spec = OcpSpec::new(track, CostVariant::D2Terminal);
            let net = DbarNet { mlp: Mlp::from_blocks(&DBAR_NET_SIZES, &ckpt.arrays)?, half_width: spec.half_width(), squash };
            Ok(Box::new(HierarchicalPolicy::mlp_d2(spec, net)))
        }
        "baseline" => {
            let rate = Interval { lower: ckpt.get_f64("rate_lower")?, upper: ckpt.get_f64("rate_upper")? };
            let mlp = Mlp::from_blocks(&BASELINE_SIZES, &ckpt.arrays)?;
            Ok(Box::new(BaselinePolicy { mlp, rate, half_width: track.half_width(), track_length: track.total_length() }))
        }
        other => Err(PolicyError::Checkpoint(format!("unknown policy kind '{other}'"))),
    }
}
