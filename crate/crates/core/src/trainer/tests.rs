use std::sync::Arc;

use super::*;
use crate::closed_loop::RolloutTape;
use crate::datasets::{generate_demos, DemoMeta, ExpertSpec};
use crate::ocp::{CostVariant, Interval, OcpSpec};
use crate::policy::{project_static, StaticRawParams};
use crate::track::{default_track, LanePreset, Segment};
use crate::vehicle::{Mat6, StateVec, VehicleState};

fn demo_from(tape: &RolloutTape) -> DemoTrajectory {
    DemoTrajectory { dt: tape.dt, states: tape.states.clone(), meta: DemoMeta::default() }
}

fn scored(policy: &mut dyn Policy, track: &TrackSpec, demo: &DemoTrajectory, t_s: usize) -> f64 {
    let tape = rollout(policy, track, &demo.states[0], &RolloutConfig::new(demo.duration())).unwrap();
    window_loss(&tape, demo, t_s).unwrap().scored
}

/// Central differences of the scored loss along `dir`.
fn directional_fd(policy: &mut dyn Policy, track: &TrackSpec, demo: &DemoTrajectory, dir: &[f64], h: f64) -> f64 {
    let p0 = policy.params();
    let shift = |s: f64| p0.iter().zip(dir).map(|(p, d)| p + s * d).collect::<Vec<_>>();
    policy.set_params(&shift(h));
    let jp = scored(policy, track, demo, 0);
    policy.set_params(&shift(-h));
    let jm = scored(policy, track, demo, 0);
    policy.set_params(&p0);
    (jp - jm) / (2.0 * h)
}

fn grad_and_loss(policy: &mut dyn Policy, track: &TrackSpec, demo: &DemoTrajectory, t_s: usize) -> (Vec<f64>, WindowLoss) {
    let tape = rollout(policy, track, &demo.states[0], &RolloutConfig::new(demo.duration()).with_grads(t_s)).unwrap();
    assert_eq!(tape.missing_grads, 0);
    bptt_gradient(&tape, demo, t_s, policy.num_params()).unwrap()
}

fn tight(variant: CostVariant) -> OcpSpec {
    let lane = if variant == CostVariant::D1Stage { LanePreset::D1 } else { LanePreset::D2 };
    OcpSpec::new(Arc::new(default_track(lane)), variant).with_tolerance(1e-11)
}

#[test]
fn own_rollout_as_demo_gives_zero() {
    let spec = tight(CostVariant::D1Stage);
    let track = spec.track.clone();
    let mut p = HierarchicalPolicy::static_d1(spec, StaticRawParams::from_projected(1.0, 1.0, 1.0, -0.4, 4.5));
    let s0 = VehicleState::new(0.0, 0.0, 150.0, 0.5, 0.01, 0.0);
    let tape = rollout(&mut p, &track, &s0, &RolloutConfig::new(3.0).with_grads(0)).unwrap();
    let (g, l) = bptt_gradient(&tape, &demo_from(&tape), 0, 4).unwrap();
    assert_eq!(l.scored, 0.0);
    assert_eq!(l.full, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn static_gradient_matches_finite_differences() {
    let spec = tight(CostVariant::D1Stage);
    let track = spec.track.clone();
    let s0 = VehicleState::new(0.05, 0.0, 100.0, 0.6, 0.01, 0.0);
    let mut expert = HierarchicalPolicy::static_d1(spec.clone(), StaticRawParams::from_projected(1.0, 1.0, 1.0, -0.4, 4.5));
    let demo = demo_from(&rollout(&mut expert, &track, &s0, &RolloutConfig::new(1.0)).unwrap());
    let mut p = HierarchicalPolicy::static_d1(spec, StaticRawParams::from_projected(1.3, 0.7, 0.9, 0.2, 4.5));
    let (g, _) = grad_and_loss(&mut p, &track, &demo, 0);
    for i in 0..4 {
        let mut e = vec![0.0; 4];
        e[i] = 1.0;
        let fd = directional_fd(&mut p, &track, &demo, &e, 1e-5);
        assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-8), "raw {i}: fd {fd} vs {}", g[i]);
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    let spec = tight(CostVariant::D2Terminal);
    let track = spec.track.clone();
    let s0 = VehicleState::new(0.0, 0.0, 160.0, -1.0, 0.0, 0.0);
    let mut expert = HierarchicalPolicy::mlp_d2(spec.clone(), DbarNet::random(8.0, true, 100));
    let demo = demo_from(&rollout(&mut expert, &track, &s0, &RolloutConfig::new(1.0)).unwrap());

    let mut mpc = HierarchicalPolicy::mlp_d2(spec, DbarNet::random(8.0, true, 7));
    let mut base = BaselinePolicy::random(&track, Interval::symmetric(0.8), 7);
    let policies: [&mut dyn Policy; 2] = [&mut mpc, &mut base];
    for p in policies {
        let (g, _) = grad_and_loss(p, &track, &demo, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let dir: Vec<f64> = (0..g.len()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let fd = directional_fd(p, &track, &demo, &dir, 1e-6);
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-8), "{}: fd {fd} vs {an}", p.kind());
        }
    }
}

#[test]
fn window_end_truncation() {
    let spec = tight(CostVariant::D1Stage);
    let track = spec.track.clone();
    let s0 = VehicleState::new(0.0, 0.0, 300.0, 0.3, 0.0, 0.0);
    let mut p = HierarchicalPolicy::static_d1(spec, StaticRawParams::initial(4.5));
    let tape = rollout(&mut p, &track, &s0, &RolloutConfig::new(1.0).with_grads(9)).unwrap();
    let mut demo = demo_from(&tape);
    for s in demo.states.iter_mut() {
        s.d -= 0.1;
    }
    let (g, l) = bptt_gradient(&tape, &demo, 10, 4).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
    assert!((l.scored - 0.01).abs() < 1e-15);
    assert_eq!(l.scored_len, 1);

    let (g, _) = bptt_gradient(&tape, &demo, 9, 4).unwrap();
    let r = 2.0 * 0.1 * tape.plant_da[9][D];
    for i in 0..4 {
        assert!((g[i] - r * tape.policy_dparams[9][i]).abs() <= 1e-15);
    }
}

/// Affine closed loop `s⁺ = A s + B a`, `a = K s + θ·p`, built by hand.
fn linear_tape(theta: &[f64], s_start: StateVec, steps: usize) -> RolloutTape {
    let mut a: Mat6 = [[0.0; 6]; 6];
    for i in 0..6 {
        a[i][i] = 0.9;
        a[i][(i + 1) % 6] = 0.1 * (i as f64 + 1.0);
    }
    let b: StateVec = [0.2, 0.0, 0.1, 0.5, -0.3, 1.0];
    let k: StateVec = [-0.1, 0.05, 0.0, -0.4, 0.2, -0.3];
    let pgrad = vec![1.0, -0.5];
    let mut s = s_start;
    let mut tape = RolloutTape {
        dt: 0.1,
        track: "linear".into(),
        states: vec![],
        actions: vec![],
        latents: vec![],
        kappa: vec![0.0; steps + 1],
        plant_ds: vec![],
        plant_da: vec![],
        policy_ds: vec![],
        policy_dparams: vec![],
        solver: vec![],
        failed: vec![],
        missing_grads: 0,
        grads_from: 0,
    };
    for _ in 0..steps {
        let u: f64 = (0..6).map(|i| k[i] * s[i]).sum::<f64>() + theta[0] * pgrad[0] + theta[1] * pgrad[1];
        tape.states.push(VehicleState::from_array(&s));
        tape.actions.push(u);
        tape.latents.push([0.0; 7]);
        tape.plant_ds.push(a);
        tape.plant_da.push(b);
        tape.policy_ds.push(k);
        tape.policy_dparams.push(pgrad.clone());
        tape.solver.push(None);
        tape.failed.push(false);
        s = std::array::from_fn(|i| (0..6).map(|j| a[i][j] * s[j]).sum::<f64>() + b[i] * u);
    }
    tape.states.push(VehicleState::from_array(&s));
    tape
}

#[test]
fn truncation_cuts_state_dependence() {
    let theta = [0.3, -0.2];
    let s0: StateVec = [0.1, -0.2, 0.0, 0.5, 0.05, 0.0];
    let tape = linear_tape(&theta, s0, 3);
    let demo = DemoTrajectory {
        dt: 0.1,
        states: (0..4).map(|t| VehicleState::new(0.0, 0.0, 0.0, 0.1 * t as f64, 0.0, 0.0)).collect(),
        meta: DemoMeta::default(),
    };
    let t_s = 1;
    let (g, l) = bptt_gradient(&tape, &demo, t_s, 2).unwrap();
    let s1 = tape.states[1].to_array();
    // oracle: restart the affine loop at the (fixed) state s_1
    let j_from_s1 = |th: &[f64]| {
        let sub = linear_tape(th, s1, 2);
        (0..3).map(|k| (sub.states[k].d - demo.states[k + 1].d).powi(2)).sum::<f64>()
    };
    assert!((j_from_s1(&theta) - l.scored).abs() < 1e-15);
    let h = 1e-4;
    for i in 0..2 {
        let (mut p, mut m) = (theta, theta);
        p[i] += h;
        m[i] -= h;
        let fd = (j_from_s1(&p) - j_from_s1(&m)) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-9, "{fd} vs {}", g[i]);
    }
    // without the cut, θ would also act through a_0 on s_1
    let (g_full, _) = bptt_gradient(&tape, &demo, 0, 2).unwrap();
    let j_full_window = |th: &[f64]| {
        let t = linear_tape(th, s0, 3);
        (1..4).map(|k| (t.states[k].d - demo.states[k].d).powi(2)).sum::<f64>()
    };
    let fd_full = (j_full_window(&[theta[0] + h, theta[1]]) - j_full_window(&[theta[0] - h, theta[1]])) / (2.0 * h);
    assert!((fd_full - g_full[0]).abs() < 1e-9);
    assert!((g_full[0] - g[0]).abs() > 1e-3);
}

#[test]
fn misaligned_inputs_rejected() {
    let tape = linear_tape(&[0.0, 0.0], [0.0; 6], 3);
    let short = DemoTrajectory { dt: 0.1, states: tape.states[..3].to_vec(), meta: DemoMeta::default() };
    assert!(matches!(bptt_gradient(&tape, &short, 0, 2), Err(TrainerError::Misaligned(_))));
    let wrong_dt = DemoTrajectory { dt: 0.05, states: tape.states.clone(), meta: DemoMeta::default() };
    assert!(matches!(bptt_gradient(&tape, &wrong_dt, 0, 2), Err(TrainerError::Misaligned(_))));
    let ok = DemoTrajectory { dt: 0.1, states: tape.states.clone(), meta: DemoMeta::default() };
    assert!(bptt_gradient(&tape, &ok, 4, 2).is_err());
}

#[test]
fn zero_baseline_on_centerline_has_zero_loss() {
    let track = TrackSpec::straight(1000.0, 4.5).unwrap();
    let mut p = BaselinePolicy::zeros(&track, Interval::symmetric(0.8));
    let demo = DemoTrajectory { dt: 0.1, states: vec![VehicleState::centered(0.0); 11], meta: DemoMeta::default() };
    let mut demo = demo;
    for (t, s) in demo.states.iter_mut().enumerate() {
        s.sigma = step_sigma(t);
    }
    let (g, l) = grad_and_loss(&mut p, &track, &demo, 0);
    assert_eq!(l.scored, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
}

fn step_sigma(t: usize) -> f64 {
    t as f64 * 0.1 * crate::vehicle::VehicleParams::default().v_x
}

#[test]
fn sl_pretraining_fits_a_constant_target() {
    let track = Arc::new(TrackSpec::constant(2.0 * std::f64::consts::PI * 200.0, 1.0 / 200.0, 8.0).unwrap());
    let expert = ExpertSpec { variant: crate::datasets::ExpertVariant::D1ConstOffset { d_bar_star: -0.4 }, noise_std: 0.0, seed: 0 };
    let demos = generate_demos(track.clone(), &expert, 1).unwrap();
    let mut net = DbarNet::random(8.0, true, 1);
    let report = pretrain_sl_dbar(&mut net, &track, &demos, &SlConfig::default()).unwrap();
    assert!(report.samples >= 40);
    assert!(report.mse.last().unwrap() < &report.mse[0]);
    let out = net.forward(&track.curvature_preview(0.0)).0;
    assert!((out + 0.4).abs() <= 0.02, "d̄ = {out}");

    assert!(matches!(pretrain_sl_dbar(&mut net, &track, &[], &SlConfig::default()), Err(TrainerError::Empty(_))));
}

#[test]
fn short_training_run_moves_toward_the_expert() {
    let track = Arc::new(TrackSpec::new("hook", vec![Segment::new(120.0, 1.0 / 100.0), Segment::new(300.0, 0.0)], 4.5).unwrap());
    let demos = generate_demos(track.clone(), &ExpertSpec::d1(0).noise_free(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = OcpSpec::new(track, CostVariant::D1Stage);
    let mut p = HierarchicalPolicy::static_d1(spec, StaticRawParams::initial(4.5));
    let cfg = TrainConfig { epochs: 4, batch_size: 2, out_dir: Some(dir.path().into()), ..TrainConfig::for_kind("static-d1") };
    let report = train_mpc_bco(&mut p, &demos, &[], &cfg).unwrap();
    assert_eq!(report.history[0].epoch, 0);
    assert!(report.best_val() < report.initial_val());
    let (theta, _) = project_static(&StaticRawParams { raw: report.params.clone().try_into().unwrap() }, 4.5);
    assert!(theta.d_bar() < 0.0);
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,batch,train_J,val_J,grad_norm,active_set_flips\n"));
    assert!(dir.path().join("epoch_001.ckpt").exists());

    let bad = TrainConfig { t_s: 10.0, ..cfg };
    assert!(matches!(train_mpc_bco(&mut p, &demos, &[], &bad), Err(TrainerError::Config(_))));
}
