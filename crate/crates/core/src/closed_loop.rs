//! Closed-loop simulation of a policy on the track with the RK4 bicycle
//! model as plant, recording what reverse-mode training needs.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::policy::{Policy, PolicyError, SolverTrace};
use crate::track::{Preview, TrackSpec};
use crate::vehicle::{step_jacobians, step_rk4, Mat6, StateVec, VehicleError, VehicleParams, VehicleState, DEFAULT_DT};

/// Consecutive policy failures tolerated before a rollout is aborted.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("rollout duration {duration} s is not a positive multiple of dt = {dt} s")]
    BadDuration { duration: f64, dt: f64 },
    #[error("initial state outside the lane: |d| = {d} > {half_width}")]
    StartOutsideLane { d: f64, half_width: f64 },
    #[error("policy failed {MAX_CONSECUTIVE_FAILURES} consecutive times, last at step {step}: {source}")]
    Aborted {
        step: usize,
        #[source]
        source: PolicyError,
    },
    #[error("plant step {step}: {source}")]
    Plant {
        step: usize,
        #[source]
        source: VehicleError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Latent input of the indirect controllers: the curvature preview at the
/// current arc position. It is treated as a constant by every gradient.
pub fn latent_q(track: &TrackSpec, s: &VehicleState) -> Preview {
    track.curvature_preview(s.sigma)
}

/// Shared CSV sink for per-step solver diagnostics of every rollout that
/// carries it. Cloning shares the sink.
#[derive(Clone)]
pub struct SolverLog {
    inner: Arc<Mutex<(Box<dyn Write + Send>, usize)>>,
}

impl std::fmt::Debug for SolverLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SolverLog")
    }
}

impl SolverLog {
    pub const HEADER: &'static str = "rollout,step,sigma,d,failed,converged,iterations,qp_iterations,kkt_residual,active_count,relaxed";

    pub fn new(mut sink: Box<dyn Write + Send>) -> std::io::Result<Self> {
        writeln!(sink, "{}", Self::HEADER)?;
        Ok(Self { inner: Arc::new(Mutex::new((sink, 0))) })
    }

    pub fn create(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Self::new(Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)))
    }

    fn begin(&self) -> usize {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        g.1 += 1;
        g.1 - 1
    }

    fn row(&self, rollout: usize, step: usize, s: &VehicleState, failed: bool, trace: Option<&SolverTrace>) {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let line = match trace {
            Some(t) => format!(
                "{rollout},{step},{:?},{:?},{failed},{},{},{},{:?},{},{}",
                s.sigma, s.d, t.converged, t.iterations, t.qp_iterations, t.kkt_residual, t.active_count, t.relaxed
            ),
            None => format!("{rollout},{step},{:?},{:?},{failed},,,,,,", s.sigma, s.d),
        };
        if let Err(e) = writeln!(g.0, "{line}") {
            log::warn!("solver log write failed: {e}");
        }
    }

    pub fn flush(&self) -> std::io::Result<()> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).0.flush()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    /// Simulated time in seconds.
    pub duration: f64,
    pub dt: f64,
    /// Plant parameters (use the MPC's own for a consistent model).
    pub vehicle: VehicleParams,
    pub record_grads: bool,
    /// First step whose policy Jacobians are recorded. Earlier steps only
    /// get plant Jacobians; truncated backpropagation never reads them.
    pub grads_from: usize,
    pub solver_log: Option<SolverLog>,
}

impl RolloutConfig {
    pub fn new(duration: f64) -> Self {
        Self { duration, dt: DEFAULT_DT, vehicle: VehicleParams::default(), record_grads: false, grads_from: 0, solver_log: None }
    }

    pub fn with_solver_log(mut self, log: Option<SolverLog>) -> Self {
        self.solver_log = log;
        self
    }

    pub fn with_grads(mut self, from_step: usize) -> Self {
        self.record_grads = true;
        self.grads_from = from_step;
        self
    }

    pub fn with_vehicle(mut self, vehicle: VehicleParams) -> Self {
        self.vehicle = vehicle;
        self
    }

    pub fn steps(&self) -> Result<usize, RolloutError> {
        let n = (self.duration / self.dt).round();
        if !(n >= 1.0) || (n * self.dt - self.duration).abs() > 1e-9 * self.duration.max(1.0) {
            return Err(RolloutError::BadDuration { duration: self.duration, dt: self.dt });
        }
        Ok(n as usize)
    }
}

/// Everything recorded along one rollout. Per-step vectors have one entry
/// per action; `states` has one more.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTape {
    pub dt: f64,
    pub track: String,
    pub states: Vec<VehicleState>,
    pub actions: Vec<f64>,
    pub latents: Vec<Preview>,
    /// Track curvature at every state.
    pub kappa: Vec<f64>,
    /// `∂F/∂s`, empty unless gradients were recorded.
    pub plant_ds: Vec<Mat6>,
    /// `∂F/∂a`, empty unless gradients were recorded.
    pub plant_da: Vec<StateVec>,
    /// `∂π/∂s` per step (zero where unavailable or not requested).
    pub policy_ds: Vec<StateVec>,
    /// `∂π/∂params` per step (empty where unavailable or not requested).
    pub policy_dparams: Vec<Vec<f64>>,
    pub solver: Vec<Option<SolverTrace>>,
    /// Steps where the policy failed and the previous action was reused.
    pub failed: Vec<bool>,
    /// Requested policy gradients that could not be formed.
    pub missing_grads: usize,
    pub grads_from: usize,
}

impl RolloutTape {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn has_grads(&self) -> bool {
        self.plant_ds.len() == self.steps()
    }

    /// True if any step fell back to the previous action.
    pub fn degraded(&self) -> bool {
        self.failed.iter().any(|f| *f)
    }

    pub fn d(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.d).collect()
    }

    /// Largest `|d|` reached.
    pub fn max_abs_d(&self) -> f64 {
        self.states.iter().map(|s| s.d.abs()).fold(0.0, f64::max)
    }

    /// Number of steps where the MPC active set differs from the step before.
    pub fn active_set_changes(&self) -> usize {
        let rows: Vec<&[usize]> = self.solver.iter().flatten().map(|s| s.active_rows.as_slice()).collect();
        rows.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,sigma,d,theta_e,v_y,psi_dot,delta,action,kappa,converged\n");
        for (i, s) in self.states.iter().enumerate() {
            let (action, conv) = match self.actions.get(i) {
                Some(a) => (format!("{a:?}"), if self.failed[i] { "0" } else { "1" }),
                None => (String::new(), ""),
            };
            let _ = writeln!(
                out,
                "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?},{}",
                i as f64 * self.dt,
                s.sigma,
                s.d,
                s.theta_e,
                s.v_y,
                s.psi_dot,
                s.delta,
                action,
                self.kappa[i],
                conv
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), RolloutError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Runs `policy` in closed loop from `s0`. The plant is [`step_rk4`] on the
/// track itself. When the policy fails, the previous action is reused with
/// zero gradient and the step is flagged; three failures in a row abort.
pub fn rollout(
    policy: &mut dyn Policy,
    track: &TrackSpec,
    s0: &VehicleState,
    cfg: &RolloutConfig,
) -> Result<RolloutTape, RolloutError> {
    let steps = cfg.steps()?;
    if s0.d.abs() > track.half_width() {
        return Err(RolloutError::StartOutsideLane { d: s0.d, half_width: track.half_width() });
    }
    policy.reset();
    let np = policy.num_params();
    let mut tape = RolloutTape {
        dt: cfg.dt,
        track: track.name().to_string(),
        states: Vec::with_capacity(steps + 1),
        actions: Vec::with_capacity(steps),
        latents: Vec::with_capacity(steps),
        kappa: Vec::with_capacity(steps + 1),
        plant_ds: Vec::new(),
        plant_da: Vec::new(),
        policy_ds: Vec::with_capacity(steps),
        policy_dparams: Vec::with_capacity(steps),
        solver: Vec::with_capacity(steps),
        failed: Vec::with_capacity(steps),
        missing_grads: 0,
        grads_from: cfg.grads_from,
    };
    let log_id = cfg.solver_log.as_ref().map(|l| l.begin());
    let mut s = *s0;
    let mut last_action = 0.0;
    let mut streak = 0;
    for t in 0..steps {
        let chi = latent_q(track, &s);
        let want = cfg.record_grads && t >= cfg.grads_from;
        let (action, ds, dparams, trace, failed) = match policy.act(&s, &chi, want) {
            Ok(out) => {
                streak = 0;
                let (ds, dp) = match out.grads {
                    Some(g) => (g.ds, g.dparams),
                    None => {
                        if want {
                            tape.missing_grads += 1;
                        }
                        ([0.0; 6], Vec::new())
                    }
                };
                (out.action, ds, dp, out.solver, false)
            }
            Err(e) => {
                streak += 1;
                if streak >= MAX_CONSECUTIVE_FAILURES {
                    return Err(RolloutError::Aborted { step: t, source: e });
                }
                log::warn!("step {t}: policy failed ({e}), reusing previous action");
                if want {
                    tape.missing_grads += 1;
                }
                (last_action, [0.0; 6], Vec::new(), None, true)
            }
        };
        debug_assert!(dparams.is_empty() || dparams.len() == np);
        if cfg.record_grads {
            let (a, b) = step_jacobians(&s, action, &cfg.vehicle, track, cfg.dt)
                .map_err(|source| RolloutError::Plant { step: t, source })?;
            tape.plant_ds.push(a);
            tape.plant_da.push(b);
        }
        let next = step_rk4(&s, action, &cfg.vehicle, track, cfg.dt).map_err(|source| RolloutError::Plant { step: t, source })?;
        if let (Some(l), Some(id)) = (&cfg.solver_log, log_id) {
            l.row(id, t, &s, failed, trace.as_ref());
        }
        tape.states.push(s);
        tape.kappa.push(track.curvature_at(s.sigma));
        tape.latents.push(chi);
        tape.actions.push(action);
        tape.policy_ds.push(ds);
        tape.policy_dparams.push(dparams);
        tape.solver.push(trace);
        tape.failed.push(failed);
        last_action = action;
        s = next;
    }
    tape.kappa.push(track.curvature_at(s.sigma));
    tape.states.push(s);
    Ok(tape)
}
