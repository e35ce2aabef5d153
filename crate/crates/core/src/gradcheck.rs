//! Numerical integrity checks: integrator order, plant Jacobians,
//! parameter projections, MPC symmetries, implicit sensitivities and
//! closed-loop gradients, each against an independent finite-difference
//! or analytic oracle.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::closed_loop::{rollout, RolloutConfig};
use crate::datasets::{DemoMeta, DemoTrajectory};
use crate::ocp::{mpc_control, solve, transcribe, CostVariant, Interval, OcpSpec, Theta};
use crate::policy::{project_static, BaselinePolicy, DbarNet, HierarchicalPolicy, Policy, StaticRawParams};
use crate::sensitivity::policy_jacobians;
use crate::track::{default_track, ConstCurvature, LanePreset, Segment, TrackSpec};
use crate::trainer::{bptt_gradient, window_loss};
use crate::vehicle::{step_jacobians, step_rk4, VehicleParams, VehicleState, NX};

/// Solver tolerance used whenever MPC outputs are differenced.
pub const FD_SOLVER_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Instances compared.
    pub checked: usize,
    /// Instances skipped (e.g. active set changed inside the stencil).
    pub skipped: usize,
    /// Worst observed error in the check's own metric.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, worst: f64, tolerance: f64, checked: usize, skipped: usize, detail: String) -> Self {
        Self { name: name.into(), passed: worst <= tolerance && checked > 0, checked, skipped, worst, tolerance, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<22} worst {:.3e} (tol {:.1e}) over {} checked, {} skipped{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.checked,
            self.skipped,
            if self.detail.is_empty() { String::new() } else { format!("; {}", self.detail) }
        )
    }
}

/// Relative error with a small absolute floor for near-zero derivatives.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Ratio of one-interval errors at `dt` and `dt/2` against a fine
/// reference, on a trajectory where only the smooth Frenet kinematics move.
pub fn rk4_order() -> CheckOutcome {
    let p = VehicleParams::default();
    let x = VehicleState::new(0.0, 0.0, 0.0, 1.0, 0.4, 0.0);
    let (kappa, t) = (0.05, 0.1);
    let integrate = |dt: f64| {
        let n = (t / dt).round() as usize;
        let mut s = x;
        for _ in 0..n {
            s = step_rk4(&s, 0.0, &p, &ConstCurvature(kappa), t / n as f64).expect("smooth region");
        }
        s.to_array()
    };
    let reference = integrate(1e-4);
    let err = |dt: f64| {
        let a = integrate(dt);
        (0..NX).map(|i| (a[i] - reference[i]).abs()).fold(0.0, f64::max)
    };
    let ratio = err(0.1) / err(0.05);
    CheckOutcome::new("rk4_order", (ratio - 16.0).abs(), 3.0, 1, 0, format!("error ratio {ratio:.3}"))
}

/// Exact step Jacobians against central differences (h = 1e-6).
pub fn plant_jacobians(instances: usize, seed: u64) -> CheckOutcome {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let x = VehicleState::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
            rng.random_range(0.0..1200.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.1..0.1),
        );
        let u = rng.random_range(-0.5..0.5);
        let curv = ConstCurvature(rng.random_range(-0.015..0.015));
        let (a, b) = step_jacobians(&x, u, &p, &curv, 0.1).expect("in-lane state");
        let f = |x: [f64; NX], u: f64| step_rk4(&VehicleState::from_array(&x), u, &p, &curv, 0.1).expect("in-lane state").to_array();
        let base = x.to_array();
        for j in 0..=NX {
            let (fp, fm) = if j < NX {
                let (mut xp, mut xm) = (base, base);
                xp[j] += h;
                xm[j] -= h;
                (f(xp, u), f(xm, u))
            } else {
                (f(base, u + h), f(base, u - h))
            };
            for i in 0..NX {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let an = if j < NX { a[i][j] } else { b[i] };
                worst = worst.max((fd - an).abs() / fd.abs().max(1.0));
            }
        }
    }
    CheckOutcome::new("plant_jacobian", worst, 1e-6, instances, 0, String::new())
}

/// Softplus / tanh projection Jacobian against central differences.
pub fn projection_gradients(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let w = rng.random_range(2.0..10.0);
        let raw = StaticRawParams { raw: std::array::from_fn(|_| rng.random_range(-6.0..6.0)) };
        let (_, jac) = project_static(&raw, w);
        for i in 0..4 {
            let (mut a, mut b) = (raw, raw);
            a.raw[i] += h;
            b.raw[i] -= h;
            let fd = (project_static(&a, w).0.to_vec()[i] - project_static(&b, w).0.to_vec()[i]) / (2.0 * h);
            worst = worst.max((fd - jac[i]).abs() / (1.0 + jac[i].abs()));
        }
    }
    CheckOutcome::new("projection_gradient", worst, 1e-8, instances, 0, String::new())
}

fn random_start(rng: &mut ChaCha8Rng, half: f64, spread: f64) -> VehicleState {
    VehicleState::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.05..0.05),
        rng.random_range(0.0..1200.0),
        rng.random_range(-spread..spread) * half,
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.03..0.03),
    )
}

fn random_theta(rng: &mut ChaCha8Rng, variant: CostVariant, half: f64) -> Theta {
    match variant {
        CostVariant::D1Stage => Theta::Stage {
            w_d: rng.random_range(0.2..3.0),
            w_theta: rng.random_range(0.2..3.0),
            w_rate: rng.random_range(0.2..3.0),
            d_bar: rng.random_range(-0.8..0.8) * half,
        },
        CostVariant::D2Terminal => Theta::Terminal { d_bar: rng.random_range(-0.8..0.8) * half },
    }
}

/// `u_0` on the mirrored track from the mirrored state is `-u_0`.
pub fn mirror_symmetry(instances: usize, seed: u64) -> CheckOutcome {
    let track = default_track(LanePreset::D1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for k in 0..instances {
        let variant = if k % 2 == 0 { CostVariant::D1Stage } else { CostVariant::D2Terminal };
        let spec = OcpSpec::new(Arc::new(track.clone()), variant).with_tolerance(1e-10);
        let mirror = OcpSpec::new(Arc::new(track.mirrored()), variant).with_tolerance(1e-10);
        let s0 = random_start(&mut rng, spec.half_width(), 0.8);
        let theta = random_theta(&mut rng, variant, spec.half_width());
        let mut mirrored = theta.to_vec();
        let last = mirrored.len() - 1;
        mirrored[last] *= -1.0;
        let mirrored = Theta::from_slice(variant, &mirrored);
        let (Ok((u, _)), Ok((um, _))) =
            (mpc_control(&spec, &s0, &theta, None), mpc_control(&mirror, &s0.mirrored(), &mirrored, None))
        else {
            continue;
        };
        worst = worst.max((u + um).abs());
        checked += 1;
    }
    CheckOutcome::new("mirror_symmetry", worst, 1e-6, checked, instances - checked, String::new())
}

/// Scaling every D1 weight by the same factor leaves `u_0` unchanged.
pub fn cost_scaling(instances: usize, seed: u64) -> CheckOutcome {
    let spec = OcpSpec::new(Arc::new(default_track(LanePreset::D1)), CostVariant::D1Stage).with_tolerance(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for _ in 0..instances {
        let s0 = random_start(&mut rng, spec.half_width(), 0.8);
        let Theta::Stage { w_d, w_theta, w_rate, d_bar } = random_theta(&mut rng, CostVariant::D1Stage, spec.half_width()) else {
            unreachable!()
        };
        let Ok((u, _)) = mpc_control(&spec, &s0, &Theta::Stage { w_d, w_theta, w_rate, d_bar }, None) else { continue };
        for c in [0.1, 3.0, 25.0] {
            let scaled = Theta::Stage { w_d: c * w_d, w_theta: c * w_theta, w_rate: c * w_rate, d_bar };
            if let Ok((uc, _)) = mpc_control(&spec, &s0, &scaled, None) {
                worst = worst.max((uc - u).abs());
            }
        }
        checked += 1;
    }
    CheckOutcome::new("cost_scaling", worst, 1e-8, checked, instances - checked, String::new())
}

/// A start near the outer edge of a curve that bends away, with a cost
/// pulling toward that edge, so lane rows bind along the horizon.
fn lane_active_instance(rng: &mut ChaCha8Rng, variant: CostVariant) -> (OcpSpec, VehicleState, Theta) {
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let kappa = -dir / rng.random_range(55.0..90.0);
    let lead = rng.random_range(20.0..40.0);
    let track = TrackSpec::new("edge", vec![Segment::new(lead, 0.0), Segment::new(500.0, kappa)], 4.5).expect("valid track");
    let spec = OcpSpec::new(Arc::new(track), variant).with_tolerance(FD_SOLVER_TOL);
    let half = spec.half_width();
    let s0 = VehicleState::new(
        0.0,
        0.0,
        rng.random_range(0.0..lead * 0.7),
        dir * rng.random_range(0.8..0.92) * half,
        dir * rng.random_range(0.0..0.03),
        0.0,
    );
    let theta = match variant {
        CostVariant::D1Stage => Theta::Stage {
            w_d: rng.random_range(0.02..0.1),
            w_theta: rng.random_range(0.5..2.0),
            w_rate: rng.random_range(0.5..2.0),
            d_bar: dir * 0.99 * half,
        },
        CostVariant::D2Terminal => Theta::Terminal { d_bar: dir * 0.99 * half },
    };
    (spec, s0, theta)
}

/// Adjoint `∂u_0/∂θ` and `∂u_0/∂s` against central differences
/// (h = 1e-5) of re-solved MPC problems. Instances whose active set moves
/// inside the stencil are skipped.
pub fn sensitivity_fd(interior: usize, lane_active: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let track = Arc::new(default_track(LanePreset::D1));
    let h = 1e-5;
    let (mut worst, mut checked, mut skipped, mut active_checked) = (0.0_f64, 0usize, 0usize, 0usize);
    let mut attempts = 0;
    while (checked < interior + lane_active || active_checked < lane_active) && attempts < 5 * (interior + lane_active) {
        attempts += 1;
        let variant = if attempts % 2 == 0 { CostVariant::D1Stage } else { CostVariant::D2Terminal };
        let want_active = active_checked < lane_active && (checked >= interior || attempts % 3 == 0);
        let (spec, s0, theta) = if want_active {
            lane_active_instance(&mut rng, variant)
        } else {
            let spec = OcpSpec::new(track.clone(), variant).with_tolerance(FD_SOLVER_TOL);
            let s0 = random_start(&mut rng, spec.half_width(), 0.7);
            let theta = random_theta(&mut rng, variant, spec.half_width());
            (spec, s0, theta)
        };
        let solve_at = |s: &VehicleState, th: &Theta| {
            let nlp = transcribe(&spec, s, th).ok()?;
            let sol = solve(&nlp, None).ok()?;
            Some((nlp, sol))
        };
        let Some((nlp, sol)) = solve_at(&s0, &theta) else {
            skipped += 1;
            continue;
        };
        let lane_rows = nlp.ineqs.iter().zip(&sol.active).filter(|(q, a)| q.lane && **a).count();
        let Ok(jac) = policy_jacobians(&sol, &nlp, &theta) else {
            skipped += 1;
            continue;
        };
        let mut probes: Vec<(Vec<f64>, VehicleState, f64)> = Vec::new();
        let base = theta.to_vec();
        for i in 0..base.len() {
            let mut e = vec![0.0; base.len()];
            e[i] = h;
            probes.push((e, s0, jac.du0_dtheta[i]));
        }
        for i in 0..NX {
            let mut x = [0.0; NX];
            x[i] = h;
            probes.push((vec![0.0; base.len()], VehicleState::from_array(&x), jac.du0_ds[i]));
        }
        let mut stable = true;
        let mut local = 0.0_f64;
        for (dth, ds, adjoint) in &probes {
            let shift = |sgn: f64| {
                let th: Vec<f64> = base.iter().zip(dth).map(|(a, b)| a + sgn * b).collect();
                let s = s0.to_array();
                let d = ds.to_array();
                let s = if dth.iter().any(|v| *v != 0.0) { s0 } else { VehicleState::from_array(&std::array::from_fn(|k| s[k] + sgn * d[k])) };
                solve_at(&s, &Theta::from_slice(theta.variant(), &th))
            };
            let (Some((_, p)), Some((_, m))) = (shift(1.0), shift(-1.0)) else {
                stable = false;
                break;
            };
            if p.active != sol.active || m.active != sol.active {
                stable = false;
                break;
            }
            local = local.max(rel_err(*adjoint, (p.u0() - m.u0()) / (2.0 * h)));
        }
        if !stable {
            skipped += 1;
            continue;
        }
        worst = worst.max(local);
        checked += 1;
        if lane_rows > 0 {
            active_checked += 1;
        }
    }
    let mut out = CheckOutcome::new("sensitivity_fd", worst, 1e-4, checked, skipped, format!("{active_checked} with an active lane row"));
    out.passed &= checked >= interior + lane_active && active_checked >= lane_active;
    out
}

/// Which policy parameterization a closed-loop gradient check uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PolicyKind {
    StaticD1,
    MlpD2,
    Baseline,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::StaticD1 => "static-d1",
            PolicyKind::MlpD2 => "mlp-d2",
            PolicyKind::Baseline => "baseline",
        }
    }
}

fn build_policy(kind: PolicyKind, seed: u64, rng: &mut ChaCha8Rng) -> (Box<dyn Policy>, Arc<TrackSpec>) {
    match kind {
        PolicyKind::StaticD1 => {
            let track = Arc::new(default_track(LanePreset::D1));
            let spec = OcpSpec::new(track.clone(), CostVariant::D1Stage).with_tolerance(FD_SOLVER_TOL);
            let raw = StaticRawParams::from_projected(
                rng.random_range(0.3..3.0),
                rng.random_range(0.3..3.0),
                rng.random_range(0.3..3.0),
                rng.random_range(-1.5..1.5),
                4.5,
            );
            (Box::new(HierarchicalPolicy::static_d1(spec, raw)), track)
        }
        PolicyKind::MlpD2 => {
            let track = Arc::new(default_track(LanePreset::D2));
            let spec = OcpSpec::new(track.clone(), CostVariant::D2Terminal).with_tolerance(FD_SOLVER_TOL);
            (Box::new(HierarchicalPolicy::mlp_d2(spec, DbarNet::random(8.0, true, seed))), track)
        }
        PolicyKind::Baseline => {
            let track = Arc::new(default_track(LanePreset::D2));
            let mut p = BaselinePolicy::random(&track, Interval::symmetric(0.8), seed);
            // undo the small output init so the check exercises all layers
            let n = p.mlp.num_params();
            for v in &mut p.mlp.params_mut()[n - 33..] {
                *v *= 50.0;
            }
            (Box::new(p), track)
        }
    }
}

fn active_trace(policy: &mut dyn Policy, track: &TrackSpec, s0: &VehicleState, dur: f64) -> Option<(Vec<Vec<usize>>, Vec<VehicleState>)> {
    let tape = rollout(policy, track, s0, &RolloutConfig::new(dur)).ok()?;
    if tape.degraded() {
        return None;
    }
    Some((tape.solver.iter().map(|s| s.as_ref().map(|t| t.active_rows.clone()).unwrap_or_default()).collect(), tape.states))
}

/// Training gradient of the scored rollout loss (T = 1 s, t_s = 0) against
/// central differences of full re-run rollouts. Static parameters are
/// checked coordinate-wise, networks along three random directions.
pub fn bptt_fd(kind: PolicyKind, seeds: usize, base_seed: u64) -> CheckOutcome {
    let dur = 1.0;
    let (mut worst, mut checked, mut skipped) = (0.0_f64, 0usize, 0usize);
    for seed in base_seed..base_seed + seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut policy, track) = build_policy(kind, seed, &mut rng);
        let half = track.half_width();
        let s0 = random_start(&mut rng, half, 0.6);
        // demonstration: the same closed loop pulled toward another offset
        let target = rng.random_range(-0.5..0.5) * half;
        let spec = OcpSpec::new(track.clone(), CostVariant::D1Stage);
        let mut expert = HierarchicalPolicy::static_d1(spec, StaticRawParams::from_projected(1.0, 1.0, 1.0, target, 2.0 * half));
        let Some((_, demo_states)) = active_trace(&mut expert, &track, &s0, dur) else {
            skipped += 1;
            continue;
        };
        let demo = DemoTrajectory { dt: 0.1, states: demo_states, meta: DemoMeta::default() };
        let Ok(tape) = rollout(policy.as_mut(), &track, &s0, &RolloutConfig::new(dur).with_grads(0)) else {
            skipped += 1;
            continue;
        };
        if tape.degraded() || tape.missing_grads > 0 {
            skipped += 1;
            continue;
        }
        let np = policy.num_params();
        let (grad, _) = bptt_gradient(&tape, &demo, 0, np).expect("aligned by construction");
        let base_active: Vec<Vec<usize>> = tape.solver.iter().map(|s| s.as_ref().map(|t| t.active_rows.clone()).unwrap_or_default()).collect();
        let dirs: Vec<(Vec<f64>, f64)> = if kind == PolicyKind::StaticD1 {
            (0..np).map(|i| (std::array::from_fn::<f64, 4, _>(|k| if k == i { 1.0 } else { 0.0 }).to_vec(), 1e-5)).collect()
        } else {
            (0..3).map(|_| ((0..np).map(|_| rng.random_range(-1.0..1.0)).collect(), 1e-6)).collect()
        };
        let p0 = policy.params();
        let mut local = 0.0_f64;
        let mut stable = true;
        for (dir, h) in &dirs {
            let mut eval = |sgn: f64| {
                let p: Vec<f64> = p0.iter().zip(dir).map(|(a, d)| a + sgn * h * d).collect();
                policy.set_params(&p);
                let r = active_trace(policy.as_mut(), &track, &s0, dur);
                policy.set_params(&p0);
                r
            };
            let (Some((ap, sp)), Some((am, sm))) = (eval(1.0), eval(-1.0)) else {
                stable = false;
                break;
            };
            if ap != base_active || am != base_active {
                stable = false;
                break;
            }
            let loss = |states: Vec<VehicleState>| {
                let mut t = tape.clone();
                t.states = states;
                window_loss(&t, &demo, 0).expect("aligned").scored
            };
            let fd = (loss(sp) - loss(sm)) / (2.0 * h);
            let an: f64 = grad.iter().zip(dir).map(|(g, d)| g * d).sum();
            local = local.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
        }
        if stable {
            worst = worst.max(local);
            checked += 1;
        } else {
            skipped += 1;
        }
    }
    let mut out = CheckOutcome::new(&format!("bptt_fd[{}]", kind.name()), worst, 1e-3, checked, skipped, String::new());
    out.passed &= checked == seeds;
    out
}

/// Instance counts for [`run_suite`].
#[derive(Debug, Clone, Copy)]
pub struct SuiteSize {
    pub random_instances: usize,
    pub sensitivity_interior: usize,
    pub sensitivity_lane_active: usize,
    pub bptt_seeds: usize,
}

impl SuiteSize {
    pub const QUICK: Self = Self { random_instances: 20, sensitivity_interior: 8, sensitivity_lane_active: 4, bptt_seeds: 2 };
    pub const FULL: Self = Self { random_instances: 100, sensitivity_interior: 80, sensitivity_lane_active: 20, bptt_seeds: 10 };
}

/// Integrator order, plant Jacobians, projection gradients, mirror
/// symmetry and cost scaling, followed by the sensitivity and
/// closed-loop gradient suites.
pub fn run_suite(size: SuiteSize, seed: u64) -> Vec<CheckOutcome> {
    let n = size.random_instances;
    let mut out = vec![
        rk4_order(),
        plant_jacobians(n, seed),
        projection_gradients(n, seed + 1),
        mirror_symmetry(n.min(40), seed + 2),
        cost_scaling(n.min(20), seed + 3),
        sensitivity_fd(size.sensitivity_interior, size.sensitivity_lane_active, seed + 4),
    ];
    for kind in [PolicyKind::StaticD1, PolicyKind::MlpD2, PolicyKind::Baseline] {
        out.push(bptt_fd(kind, size.bptt_seeds, seed + 100));
    }
    out
}
