//! Validation metrics: imitation error, lane violations, comfort and time
//! to lane crossing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::closed_loop::{rollout, RolloutConfig, RolloutTape, SolverLog};
use crate::datasets::DemoTrajectory;
use crate::policy::Policy;
use crate::track::TrackSpec;
use crate::trainer::{window_loss, TrainerError};
use crate::vehicle::{lateral_accel, step_rk4, VehicleParams, VehicleState};

/// Horizon of the frozen-control lane-crossing prediction (s).
pub const TLC_CAP: f64 = 10.0;

/// Time until `|d|` exceeds `w/2` if the steering angle is held (δ̇ = 0),
/// measured as travelled arc length over `v_x`. `f64::INFINITY` when the
/// lane is not left within [`TLC_CAP`].
pub fn time_to_lane_crossing(track: &TrackSpec, s: &VehicleState, p: &VehicleParams, dt: f64) -> f64 {
    let half = track.half_width();
    let d_dot = p.v_x * s.theta_e.sin() + s.v_y * s.theta_e.cos();
    if s.d.abs() >= half && s.d * d_dot > 0.0 || s.d.abs() > half {
        return 0.0;
    }
    let mut x = *s;
    let steps = (TLC_CAP / dt).round() as usize;
    for _ in 0..steps {
        x = match step_rk4(&x, 0.0, p, track, dt) {
            Ok(n) => n,
            // leaving the curvature-singular region counts as leaving the lane
            Err(_) => return (x.sigma - s.sigma) / p.v_x,
        };
        if x.d.abs() > half {
            return (x.sigma - s.sigma) / p.v_x;
        }
    }
    f64::INFINITY
}

/// `Σ a_y² dt` over all but the last state.
pub fn comfort(states: &[VehicleState], p: &VehicleParams, dt: f64) -> f64 {
    let n = states.len().saturating_sub(1);
    states[..n].iter().map(|s| lateral_accel(s, p).powi(2) * dt).sum()
}

/// Samples with `|d| > w/2`.
pub fn lane_violations(states: &[VehicleState], half_width: f64) -> usize {
    states.iter().filter(|s| s.d.abs() > half_width).count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMetrics {
    pub lap: usize,
    pub start: usize,
    pub imitation_sum_sq: f64,
    pub imitation_rms: f64,
    pub safety_violations: usize,
    pub comfort: f64,
    /// Comfort of the demonstration over the same window.
    pub reference_comfort: f64,
    pub tlc_min: f64,
    pub max_abs_d: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Means over completed sub-trajectories.
    pub imitation_sum_sq: f64,
    pub imitation_rms: f64,
    /// Total over all completed sub-trajectories.
    pub safety_violations: usize,
    pub comfort: f64,
    pub reference_comfort: f64,
    pub tlc_min: f64,
    /// Rollouts that aborted.
    pub failures: usize,
    pub per_trajectory: Vec<TrajectoryMetrics>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n_subtraj: usize,
    /// Sub-trajectory length and scoring start (s).
    pub horizon: f64,
    pub t_s: f64,
    pub seed: u64,
    pub vehicle: VehicleParams,
    pub solver_log: Option<SolverLog>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_subtraj: 5, horizon: 10.0, t_s: 5.0, seed: 0, vehicle: VehicleParams::default(), solver_log: None }
    }
}

/// Starts `(lap, index)` of `n` sub-trajectories drawn uniformly from the
/// laps, deterministic in `seed`.
pub fn sample_starts(demos: &[DemoTrajectory], steps: usize, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let room: Vec<usize> = demos.iter().map(|d| d.states.len().saturating_sub(steps)).collect();
    let total: usize = room.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut lap = 0;
            while k >= room[lap] {
                k -= room[lap];
                lap += 1;
            }
            (lap, k)
        })
        .collect()
}

fn metrics_for(
    tape: &RolloutTape,
    window: &DemoTrajectory,
    t_s: usize,
    track: &TrackSpec,
    cfg: &EvalConfig,
    lap: usize,
    start: usize,
) -> Result<TrajectoryMetrics, TrainerError> {
    let loss = window_loss(tape, window, t_s)?;
    let tlc_min = tape
        .states
        .iter()
        .map(|s| time_to_lane_crossing(track, s, &cfg.vehicle, tape.dt))
        .fold(f64::INFINITY, f64::min);
    Ok(TrajectoryMetrics {
        lap,
        start,
        imitation_sum_sq: loss.scored,
        imitation_rms: loss.rms(),
        safety_violations: lane_violations(&tape.states, track.half_width()),
        comfort: comfort(&tape.states, &cfg.vehicle, tape.dt),
        reference_comfort: comfort(&window.states, &cfg.vehicle, window.dt),
        tlc_min,
        max_abs_d: tape.max_abs_d(),
        degraded: tape.degraded(),
    })
}

/// Rolls the policy out from the initial state of `n_subtraj` randomly
/// chosen validation sub-trajectories and compares against them.
pub fn evaluate(policy: &mut dyn Policy, demos: &[DemoTrajectory], track: &TrackSpec, cfg: &EvalConfig) -> Result<EvalReport, TrainerError> {
    let dt = crate::vehicle::DEFAULT_DT;
    let steps = (cfg.horizon / dt).round() as usize;
    let t_s = (cfg.t_s / dt).round() as usize;
    let demos: Vec<DemoTrajectory> = demos.iter().map(|d| d.resample(dt)).collect();
    let starts = sample_starts(&demos, steps, cfg.n_subtraj, cfg.seed);
    if starts.is_empty() {
        return Err(TrainerError::Empty(format!("no demonstration is {} s long", cfg.horizon)));
    }
    let rcfg = RolloutConfig::new(cfg.horizon).with_vehicle(cfg.vehicle).with_solver_log(cfg.solver_log.clone());
    let mut per = Vec::new();
    let mut failures = 0;
    for (lap, start) in starts {
        let d = &demos[lap];
        let window = DemoTrajectory { dt, states: d.states[start..=start + steps].to_vec(), meta: d.meta.clone() };
        match rollout(policy, track, &window.states[0], &rcfg) {
            Ok(tape) => per.push(metrics_for(&tape, &window, t_s, track, cfg, lap, start)?),
            Err(e) => {
                log::warn!("evaluation rollout from lap {lap} step {start} aborted: {e}");
                failures += 1;
            }
        }
    }
    Ok(summarize(per, failures))
}

fn summarize(per: Vec<TrajectoryMetrics>, failures: usize) -> EvalReport {
    let n = per.len().max(1) as f64;
    let mean = |f: fn(&TrajectoryMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    EvalReport {
        imitation_sum_sq: mean(|m| m.imitation_sum_sq),
        imitation_rms: mean(|m| m.imitation_rms),
        safety_violations: per.iter().map(|m| m.safety_violations).sum(),
        comfort: mean(|m| m.comfort),
        reference_comfort: mean(|m| m.reference_comfort),
        tlc_min: per.iter().map(|m| m.tlc_min).fold(f64::INFINITY, f64::min),
        failures,
        per_trajectory: per,
    }
}

/// Stress starts `0.8·w/2` toward the outside of each curve, 20 m before
/// it (10 m further back on every further pass over the curves).
pub fn stress_starts(track: &TrackSpec, n: usize) -> Vec<VehicleState> {
    let mut arcs = Vec::new();
    let mut pos = 0.0;
    for seg in track.segments() {
        if seg.curvature != 0.0 {
            arcs.push((pos, seg.curvature));
        }
        pos += seg.length;
    }
    if arcs.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let (start, k) = arcs[i % arcs.len()];
            let back = 20.0 + 10.0 * (i / arcs.len()) as f64;
            let d = -k.signum() * 0.8 * track.half_width();
            VehicleState::new(0.0, 0.0, (start - back).rem_euclid(track.total_length()), d, 0.0, 0.0)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StressReport {
    pub rollouts: usize,
    /// Samples with `|d| > w/2` over all completed rollouts.
    pub violations: usize,
    pub failures: usize,
    pub max_abs_d: f64,
}

/// Runs `policy` for `duration` seconds from each start.
pub fn stress_test(policy: &mut dyn Policy, track: &TrackSpec, starts: &[VehicleState], duration: f64) -> StressReport {
    let cfg = RolloutConfig::new(duration);
    let mut r = StressReport { rollouts: starts.len(), ..Default::default() };
    for s0 in starts {
        match rollout(policy, track, s0, &cfg) {
            Ok(tape) => {
                r.violations += lane_violations(&tape.states, track.half_width());
                r.max_abs_d = r.max_abs_d.max(tape.max_abs_d());
            }
            Err(e) => {
                log::warn!("stress rollout from sigma {:.1} aborted: {e}", s0.sigma);
                r.failures += 1;
            }
        }
    }
    r
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lap,start,imitation_sum_sq,imitation_rms,safety_violations,comfort,reference_comfort,tlc_min,max_abs_d,degraded\n");
        for m in &self.per_trajectory {
            out.push_str(&format!(
                "{},{},{:?},{:?},{},{:?},{:?},{:?},{:?},{}\n",
                m.lap, m.start, m.imitation_sum_sq, m.imitation_rms, m.safety_violations, m.comfort, m.reference_comfort, m.tlc_min, m.max_abs_d, m.degraded
            ));
        }
        out
    }
}
