//! Closed-loop behavioral cloning from observations: truncated
//! backpropagation through the rollout, the Adam outer loop and
//! supervised pretraining of the offset network.

mod adam;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::closed_loop::{rollout, RolloutConfig, RolloutError, RolloutTape, SolverLog};
use crate::datasets::DemoTrajectory;
use crate::policy::{BaselinePolicy, DbarNet, HierarchicalPolicy, Policy, PolicyError};
use crate::track::TrackSpec;
use crate::vehicle::{VehicleParams, D, DEFAULT_DT, NX};

pub use adam::Adam;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("demo and rollout are misaligned: {0}")]
    Misaligned(String),
    #[error("no usable training data: {0}")]
    Empty(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Imitation loss of one trajectory, `Σ (d_t - d*_t)²`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowLoss {
    /// Sum over the scored window `t_s..=T`.
    pub scored: f64,
    pub scored_len: usize,
    /// Sum over the whole window `0..=T`, for comparison.
    pub full: f64,
}

impl WindowLoss {
    /// Root-mean-square lateral error over the scored window (m).
    pub fn rms(&self) -> f64 {
        (self.scored / self.scored_len.max(1) as f64).sqrt()
    }
}

fn check_alignment(tape: &RolloutTape, demo: &DemoTrajectory, t_s: usize) -> Result<(), TrainerError> {
    if tape.states.len() != demo.states.len() {
        return Err(TrainerError::Misaligned(format!("{} rollout states vs {} demo states", tape.states.len(), demo.states.len())));
    }
    if (tape.dt - demo.dt).abs() > 1e-12 {
        return Err(TrainerError::Misaligned(format!("dt {} vs {}", tape.dt, demo.dt)));
    }
    if t_s > tape.steps() {
        return Err(TrainerError::Misaligned(format!("t_s = {t_s} beyond {} steps", tape.steps())));
    }
    Ok(())
}

/// Loss of a rollout against a time-aligned demonstration.
pub fn window_loss(tape: &RolloutTape, demo: &DemoTrajectory, t_s: usize) -> Result<WindowLoss, TrainerError> {
    check_alignment(tape, demo, t_s)?;
    let mut out = WindowLoss { scored_len: tape.states.len() - t_s, ..Default::default() };
    for (t, (s, r)) in tape.states.iter().zip(&demo.states).enumerate() {
        let e = (s.d - r.d).powi(2);
        out.full += e;
        if t >= t_s {
            out.scored += e;
        }
    }
    Ok(out)
}

/// Gradient of the scored loss with respect to the raw policy parameters,
/// by the backward recursion
///
/// ```text
/// g_t  = ∂L/∂s_t + g_{t+1} (∂F/∂s + ∂F/∂a ∂π/∂s)
/// G_t  = g_{t+1} ∂F/∂a ∂π/∂θ + G_{t+1}
/// ```
///
/// run from `t = T` down to `t = t_s`, with `g_{T+1} = G_{T+1} = 0`.
/// The state at `t_s` is treated as given. Steps whose policy gradient is
/// missing contribute nothing through the policy.
pub fn bptt_gradient(
    tape: &RolloutTape,
    demo: &DemoTrajectory,
    t_s: usize,
    num_params: usize,
) -> Result<(Vec<f64>, WindowLoss), TrainerError> {
    let loss = window_loss(tape, demo, t_s)?;
    let steps = tape.steps();
    if t_s < steps && !tape.has_grads() {
        return Err(TrainerError::Misaligned("rollout was recorded without gradients".into()));
    }
    let mut g_s = [0.0; NX];
    let mut g_theta = vec![0.0; num_params];
    for t in (t_s..=steps).rev() {
        let mut next = [0.0; NX];
        next[D] = 2.0 * (tape.states[t].d - demo.states[t].d);
        if t < steps {
            let a = &tape.plant_ds[t];
            let b = &tape.plant_da[t];
            let g_b: f64 = (0..NX).map(|i| g_s[i] * b[i]).sum();
            let pi_s = &tape.policy_ds[t];
            for j in 0..NX {
                next[j] += (0..NX).map(|i| g_s[i] * a[i][j]).sum::<f64>() + g_b * pi_s[j];
            }
            let pi_theta = &tape.policy_dparams[t];
            if !pi_theta.is_empty() {
                if pi_theta.len() != num_params {
                    return Err(TrainerError::Misaligned(format!("{} policy gradients vs {num_params} parameters", pi_theta.len())));
                }
                for (g, p) in g_theta.iter_mut().zip(pi_theta) {
                    *g += g_b * p;
                }
            }
        }
        g_s = next;
    }
    Ok((g_theta, loss))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Rollout length (s).
    pub horizon: f64,
    /// Start of the scored, backpropagated window (s).
    pub t_s: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub dt: f64,
    pub vehicle: VehicleParams,
    /// Writes `train_log.csv` and per-epoch checkpoints here.
    pub out_dir: Option<PathBuf>,
    pub solver_log: Option<SolverLog>,
}

impl TrainConfig {
    pub const LR_STATIC: f64 = 1e-2;
    pub const LR_MLP: f64 = 1e-3;
    pub const LR_BASELINE: f64 = 3e-3;
    pub const LOSS_TAG: &'static str = "sum_sq_d_scored";

    pub fn new(lr: f64) -> Self {
        Self {
            horizon: 10.0,
            t_s: 5.0,
            batch_size: 10,
            lr,
            epochs: 50,
            seed: 0,
            patience: 15,
            dt: DEFAULT_DT,
            vehicle: VehicleParams::default(),
            out_dir: None,
            solver_log: None,
        }
    }

    /// Default learning rate for a policy kind.
    pub fn for_kind(kind: &str) -> Self {
        Self::new(match kind {
            "static-d1" => Self::LR_STATIC,
            "baseline" => Self::LR_BASELINE,
            _ => Self::LR_MLP,
        })
    }

    fn steps(&self) -> Result<(usize, usize), TrainerError> {
        let n = (self.horizon / self.dt).round() as usize;
        let s = (self.t_s / self.dt).round() as usize;
        if n == 0 || s >= n || self.batch_size == 0 {
            return Err(TrainerError::Config(format!(
                "need 0 <= t_s < T and batch >= 1 (T = {}, t_s = {}, batch = {})",
                self.horizon, self.t_s, self.batch_size
            )));
        }
        Ok((n, s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    /// Mean scored loss per training trajectory.
    pub train_j: f64,
    /// Mean full-window loss per training trajectory.
    pub train_j_full: f64,
    pub val_j: f64,
    pub val_rms: f64,
    /// Mean norm of the averaged batch gradient.
    pub grad_norm: f64,
    pub active_set_flips: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Parameters left in the policy (those of the best epoch).
    pub params: Vec<f64>,
}

impl TrainReport {
    pub fn initial_val(&self) -> f64 {
        self.history[0].val_j
    }

    pub fn best_val(&self) -> f64 {
        self.history[self.best_epoch].val_j
    }
}

/// Time-aligned windows of `steps` transitions from every demonstration,
/// after resampling to `dt`, in (demo, window) order.
pub fn make_windows(demos: &[DemoTrajectory], steps: usize, dt: f64) -> Vec<DemoTrajectory> {
    demos.iter().flat_map(|d| d.resample(dt).windows(steps)).collect()
}

/// Mean scored loss and RMS of `policy` over the windows (no gradients).
pub fn evaluate_windows(
    policy: &mut dyn Policy,
    track: &TrackSpec,
    windows: &[DemoTrajectory],
    cfg: &TrainConfig,
) -> Result<(f64, f64), TrainerError> {
    let (_, t_s) = cfg.steps()?;
    if windows.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let rcfg = RolloutConfig::new(windows[0].duration()).with_vehicle(cfg.vehicle).with_solver_log(cfg.solver_log.clone());
    let (mut j, mut rms) = (0.0, 0.0);
    for w in windows {
        let tape = rollout(policy, track, &w.states[0], &RolloutConfig { dt: w.dt, ..rcfg.clone() })?;
        let l = window_loss(&tape, w, t_s)?;
        j += l.scored;
        rms += l.rms();
    }
    Ok((j / windows.len() as f64, rms / windows.len() as f64))
}

/// Closed-loop behavioral cloning of `policy` on `train`, validating on
/// `val` every epoch. The policy ends with the parameters of the best
/// validation epoch.
pub fn train_bco(
    policy: &mut dyn Policy,
    track: &TrackSpec,
    train: &[DemoTrajectory],
    val: &[DemoTrajectory],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainerError> {
    let (steps, t_s) = cfg.steps()?;
    let windows = make_windows(train, steps, cfg.dt);
    if windows.is_empty() {
        return Err(TrainerError::Empty(format!("no demonstration is {} s long", cfg.horizon)));
    }
    let val_windows = make_windows(val, steps, cfg.dt);
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let np = policy.num_params();
    let mut params = policy.params();
    let mut opt = Adam::new(np, cfg.lr);
    let rcfg = RolloutConfig::new(cfg.horizon).with_vehicle(cfg.vehicle).with_grads(t_s).with_solver_log(cfg.solver_log.clone());
    let rcfg = RolloutConfig { dt: cfg.dt, ..rcfg };

    let validate = |policy: &mut dyn Policy| -> Result<(f64, f64), TrainerError> {
        if val_windows.is_empty() {
            evaluate_windows(policy, track, &windows, cfg)
        } else {
            evaluate_windows(policy, track, &val_windows, cfg)
        }
    };

    let (val0, rms0) = validate(policy)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_j: f64::NAN,
        train_j_full: f64::NAN,
        val_j: val0,
        val_rms: rms0,
        grad_norm: f64::NAN,
        active_set_flips: 0,
        skipped: 0,
    }];
    let mut log = String::from("epoch,batch,train_J,val_J,grad_norm,active_set_flips\n");
    let (mut best_epoch, mut best_val, mut best_params) = (0, val0, params.clone());
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum_j, mut sum_full, mut used, mut skipped, mut flips) = (0.0, 0.0, 0usize, 0usize, 0usize);
        let mut norms = Vec::new();
        let mut batch_rows = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut ids = batch.to_vec();
            ids.sort_unstable();
            let mut grad = vec![0.0; np];
            let (mut batch_j, mut n, mut batch_flips) = (0.0, 0usize, 0usize);
            for &id in &ids {
                let w = &windows[id];
                let tape = rollout(policy, track, &w.states[0], &rcfg)?;
                if tape.degraded() {
                    log::warn!("epoch {epoch}: skipping window {id}, rollout degraded");
                    skipped += 1;
                    continue;
                }
                let (g, l) = bptt_gradient(&tape, w, t_s, np)?;
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += v;
                }
                batch_j += l.scored;
                sum_full += l.full;
                batch_flips += tape.active_set_changes();
                n += 1;
            }
            if n == 0 {
                continue;
            }
            for g in grad.iter_mut() {
                *g /= n as f64;
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm.is_finite() {
                opt.step(&mut params, &grad);
                policy.set_params(&params);
            } else {
                log::warn!("epoch {epoch} batch {b}: non-finite gradient, update skipped");
            }
            norms.push(norm);
            sum_j += batch_j;
            used += n;
            flips += batch_flips;
            batch_rows.push((b, batch_j / n as f64, norm, batch_flips));
        }
        if used == 0 {
            return Err(TrainerError::Empty(format!("epoch {epoch}: every rollout was degraded")));
        }
        let (val_j, val_rms) = validate(policy)?;
        for (b, j, norm, f) in batch_rows {
            let _ = writeln!(log, "{epoch},{b},{j:?},{val_j:?},{norm:?},{f}");
        }
        history.push(EpochRecord {
            epoch,
            train_j: sum_j / used as f64,
            train_j_full: sum_full / used as f64,
            val_j,
            val_rms,
            grad_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
            active_set_flips: flips,
            skipped,
        });
        log::info!("epoch {epoch}: train J {:.5}, val J {val_j:.5} (rms {val_rms:.4} m)", sum_j / used as f64);
        if let Some(dir) = &cfg.out_dir {
            policy.checkpoint().save(dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            std::fs::write(dir.join("train_log.csv"), &log)?;
        }
        if val_j < best_val * (1.0 - 1e-4) || (best_val.is_nan() && !val_j.is_nan()) {
            best_epoch = epoch;
            best_val = val_j;
            best_params = params.clone();
        } else if epoch - best_epoch >= cfg.patience {
            log::info!("validation plateau after epoch {epoch}, keeping epoch {best_epoch}");
            break;
        }
    }
    policy.set_params(&best_params);
    Ok(TrainReport { history, best_epoch, params: best_params })
}

/// [`train_bco`] for an MPC policy (static weights or offset network).
pub fn train_mpc_bco(
    policy: &mut HierarchicalPolicy,
    train: &[DemoTrajectory],
    val: &[DemoTrajectory],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainerError> {
    let track = policy.spec().track.clone();
    let cfg = TrainConfig { vehicle: policy.spec().vehicle, ..cfg.clone() };
    train_bco(policy, &track, train, val, &cfg)
}

/// [`train_bco`] for the pure-network baseline.
pub fn train_baseline_bco(
    policy: &mut BaselinePolicy,
    track: &TrackSpec,
    train: &[DemoTrajectory],
    val: &[DemoTrajectory],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainerError> {
    train_bco(policy, track, train, val, cfg)
}

#[derive(Debug, Clone)]
pub struct SlConfig {
    /// Window length (s): preview at its start, target offset at its end.
    pub window: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the best loss has not improved by this fraction for
    /// `plateau_epochs` epochs; the best parameters are kept.
    pub rel_tol: f64,
    pub plateau_epochs: usize,
    pub seed: u64,
    pub dt: f64,
}

impl Default for SlConfig {
    fn default() -> Self {
        Self { window: 2.0, lr: 1e-3, batch_size: 32, max_epochs: 3000, rel_tol: 1e-4, plateau_epochs: 10, seed: 0, dt: DEFAULT_DT }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlReport {
    pub samples: usize,
    /// Mean squared error after each epoch (index 0: before training).
    pub mse: Vec<f64>,
    pub best_epoch: usize,
}

/// Supervised fit of the offset network: curvature preview at the start
/// of each window against the demonstrated offset at its end.
pub fn pretrain_sl_dbar(net: &mut DbarNet, track: &TrackSpec, demos: &[DemoTrajectory], cfg: &SlConfig) -> Result<SlReport, TrainerError> {
    let steps = (cfg.window / cfg.dt).round() as usize;
    if steps == 0 || cfg.batch_size == 0 {
        return Err(TrainerError::Config("window and batch size must be positive".into()));
    }
    let samples: Vec<_> = make_windows(demos, steps, cfg.dt)
        .iter()
        .map(|w| (track.curvature_preview(w.states[0].sigma), w.states[steps].d))
        .collect();
    if samples.is_empty() {
        return Err(TrainerError::Empty(format!("no {} s window in the demonstrations", cfg.window)));
    }
    let mse = |net: &DbarNet| samples.iter().map(|(x, y)| (net.forward(x).0 - y).powi(2)).sum::<f64>() / samples.len() as f64;
    let mut params = net.mlp.params().to_vec();
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = vec![mse(net)];
    let mut best = (history[0], 0, params.clone());
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            for &i in batch {
                let (x, y) = &samples[i];
                let (out, tape) = net.forward(x);
                let g = net.backward(&tape, 2.0 * (out - y) / batch.len() as f64)?;
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            opt.step(&mut params, &grad);
            net.mlp.params_mut().copy_from_slice(&params);
        }
        let loss = mse(net);
        history.push(loss);
        if loss < best.0 * (1.0 - cfg.rel_tol) {
            best = (loss, epoch, params.clone());
        } else if epoch - best.1 >= cfg.plateau_epochs {
            log::info!("supervised pretraining plateau after {epoch} epochs, best mse {:.3e}", best.0);
            break;
        }
    }
    net.mlp.params_mut().copy_from_slice(&best.2);
    Ok(SlReport { samples: samples.len(), mse: history, best_epoch: best.1 })
}

#[cfg(test)]
mod tests;
