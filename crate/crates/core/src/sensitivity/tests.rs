use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ocp::{solve, transcribe, CostVariant, OcpSpec, PrimalDualSolution, Theta};
use crate::track::{default_track, LanePreset, Segment, TrackSpec};
use crate::vehicle::{VehicleState, D, NX, SIGMA};

const TOL: f64 = 1e-11;

fn solved(spec: &OcpSpec, s0: &VehicleState, theta: &Theta) -> (crate::ocp::NlpInstance, PrimalDualSolution) {
    let nlp = transcribe(spec, s0, theta).unwrap();
    let sol = solve(&nlp, None).unwrap();
    (nlp, sol)
}

fn u0(spec: &OcpSpec, s0: &VehicleState, theta: &Theta) -> (f64, Vec<bool>) {
    let (_, sol) = solved(spec, s0, theta);
    (sol.u0(), sol.active)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-6_f64).max(a.abs().max(b.abs()))
}

/// Central differences of u_0 over θ and s, or `None` when the active set
/// changes inside the stencil.
fn fd_gradients(spec: &OcpSpec, s0: &VehicleState, theta: &Theta, h: f64) -> Option<(Vec<f64>, [f64; NX])> {
    let base = theta.to_vec();
    let (_, act0) = u0(spec, s0, theta);
    let mut gt = Vec::new();
    for i in 0..base.len() {
        let mut p = base.clone();
        let mut m = base.clone();
        p[i] += h;
        m[i] -= h;
        let (up, ap) = u0(spec, s0, &Theta::from_slice(theta.variant(), &p));
        let (um, am) = u0(spec, s0, &Theta::from_slice(theta.variant(), &m));
        if ap != act0 || am != act0 {
            return None;
        }
        gt.push((up - um) / (2.0 * h));
    }
    let mut gs = [0.0; NX];
    for i in 0..NX {
        let mut p = s0.to_array();
        let mut m = s0.to_array();
        p[i] += h;
        m[i] -= h;
        let (up, ap) = u0(spec, &VehicleState::from_array(&p), theta);
        let (um, am) = u0(spec, &VehicleState::from_array(&m), theta);
        if ap != act0 || am != act0 {
            return None;
        }
        gs[i] = (up - um) / (2.0 * h);
    }
    Some((gt, gs))
}

#[test]
fn dimensions_and_residual() {
    let spec = OcpSpec::new(Arc::new(default_track(LanePreset::D1)), CostVariant::D1Stage).with_tolerance(TOL);
    let theta = Theta::Stage { w_d: 1.0, w_theta: 1.0, w_rate: 1.0, d_bar: -0.4 };
    let (nlp, sol) = solved(&spec, &VehicleState::new(0.0, 0.0, 100.0, 0.5, 0.02, 0.0), &theta);
    let kkt = build_kkt_system(&sol, &nlp, &theta).unwrap();
    assert_eq!(kkt.dim(), 146 + 126 + 200);
    assert!(kkt.residual_norm() <= 1e-6);
    let text = kkt.to_triplet_text();
    assert!(text.starts_with("# dim 472\n"));
}

#[test]
fn non_converged_rejected() {
    let spec = OcpSpec::new(Arc::new(default_track(LanePreset::D1)), CostVariant::D1Stage);
    let theta = Theta::Stage { w_d: 1.0, w_theta: 1.0, w_rate: 1.0, d_bar: 0.0 };
    let (nlp, mut sol) = solved(&spec, &VehicleState::centered(0.0), &theta);
    sol.converged = false;
    assert!(matches!(build_kkt_system(&sol, &nlp, &theta), Err(SensitivityError::NotConverged)));
}

#[test]
fn matches_finite_differences_d1_and_d2() {
    let track = Arc::new(default_track(LanePreset::D1));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for variant in [CostVariant::D1Stage, CostVariant::D2Terminal] {
        let spec = OcpSpec::new(track.clone(), variant).with_tolerance(TOL);
        let half = spec.half_width();
        for _ in 0..8 {
            let s0 = VehicleState::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.05..0.05),
                rng.random_range(0.0..1200.0),
                rng.random_range(-0.7..0.7) * half,
                rng.random_range(-0.04..0.04),
                rng.random_range(-0.03..0.03),
            );
            let theta = match variant {
                CostVariant::D1Stage => Theta::Stage {
                    w_d: rng.random_range(0.3..2.0),
                    w_theta: rng.random_range(0.3..2.0),
                    w_rate: rng.random_range(0.3..2.0),
                    d_bar: rng.random_range(-0.6..0.6) * half,
                },
                CostVariant::D2Terminal => Theta::Terminal { d_bar: rng.random_range(-0.6..0.6) * half },
            };
            let (nlp, sol) = solved(&spec, &s0, &theta);
            let Some((gt, gs)) = fd_gradients(&spec, &s0, &theta, 1e-5) else { continue };
            let jac = policy_jacobians(&sol, &nlp, &theta).unwrap();
            for (a, b) in jac.du0_dtheta.iter().zip(&gt) {
                assert!(rel_err(*a, *b) <= 1e-4, "theta: adjoint {a} vs fd {b}");
            }
            for i in 0..NX {
                assert!(rel_err(jac.du0_ds[i], gs[i]) <= 1e-4, "s[{i}]: adjoint {} vs fd {}", jac.du0_ds[i], gs[i]);
            }
            checked += 1;
        }
    }
    assert!(checked >= 10, "only {checked} stable instances");
}

#[test]
fn lane_active_instance_matches_finite_differences() {
    let track = TrackSpec::new("arc", vec![Segment::new(30.0, 0.0), Segment::new(400.0, -1.0 / 60.0)], 4.5).unwrap();
    let spec = OcpSpec::new(Arc::new(track), CostVariant::D1Stage).with_tolerance(TOL);
    let half = spec.half_width();
    let s0 = VehicleState::new(0.0, 0.0, 20.0, 0.9 * half, 0.02, 0.0);
    let theta = Theta::Stage { w_d: 0.05, w_theta: 1.0, w_rate: 1.0, d_bar: 0.99 * half };
    let (nlp, sol) = solved(&spec, &s0, &theta);
    let kkt = build_kkt_system(&sol, &nlp, &theta).unwrap();
    assert!(kkt.num_active() > 0);
    let (gt, gs) = fd_gradients(&spec, &s0, &theta, 1e-5).expect("stable active set");
    let jac = policy_jacobians(&sol, &nlp, &theta).unwrap();
    for (a, b) in jac.du0_dtheta.iter().zip(&gt) {
        assert!(rel_err(*a, *b) <= 1e-4, "adjoint {a} vs fd {b}");
    }
    for i in 0..NX {
        assert!(rel_err(jac.du0_ds[i], gs[i]) <= 1e-4, "s[{i}]: {} vs {}", jac.du0_ds[i], gs[i]);
    }
}

#[test]
fn straight_road_properties() {
    let spec = OcpSpec::new(Arc::new(TrackSpec::straight(2000.0, 4.5).unwrap()), CostVariant::D1Stage)
        .with_tolerance(TOL);
    let theta = Theta::Stage { w_d: 1.0, w_theta: 1.0, w_rate: 1.0, d_bar: 0.0 };
    let (nlp, sol) = solved(&spec, &VehicleState::centered(10.0), &theta);
    let jac = policy_jacobians(&sol, &nlp, &theta).unwrap();
    assert_eq!(jac.du0_ds[SIGMA], 0.0);
    // moving right of the target demands steering back
    assert!(jac.du0_ds[D] < 0.0);
    let (up, _) = u0(&spec, &VehicleState::new(0.0, 0.0, 10.0, 1e-5, 0.0, 0.0), &theta);
    let (um, _) = u0(&spec, &VehicleState::new(0.0, 0.0, 10.0, -1e-5, 0.0, 0.0), &theta);
    assert!(rel_err(jac.du0_ds[D], (up - um) / 2e-5) <= 1e-4);
}

#[test]
fn d2_offset_gradient_sign() {
    let spec = OcpSpec::new(Arc::new(TrackSpec::straight(2000.0, 8.0).unwrap()), CostVariant::D2Terminal)
        .with_tolerance(TOL);
    let theta = Theta::Terminal { d_bar: 1.0 };
    let (nlp, sol) = solved(&spec, &VehicleState::centered(0.0), &theta);
    let jac = policy_jacobians(&sol, &nlp, &theta).unwrap();
    assert_eq!(jac.du0_dtheta.len(), 1);
    // the target lies at larger d, and du_0/dd < 0 says positive d needs negative steering
    let steer_toward = -jac.du0_ds[D].signum();
    assert_eq!(jac.du0_dtheta[0].signum(), steer_toward);
}

#[test]
fn absent_parameter_has_zero_gradient() {
    // with W_d = 0 the offset does not enter the cost
    let spec = OcpSpec::new(Arc::new(default_track(LanePreset::D1)), CostVariant::D1Stage).with_tolerance(TOL);
    let theta = Theta::Stage { w_d: 0.0, w_theta: 1.0, w_rate: 1.0, d_bar: 0.5 };
    let (nlp, sol) = solved(&spec, &VehicleState::new(0.1, 0.0, 300.0, 0.4, 0.02, 0.0), &theta);
    let jac = policy_jacobians(&sol, &nlp, &theta).unwrap();
    assert_eq!(jac.du0_dtheta[3], 0.0);
}

#[test]
fn interior_reduction_matches_dense_full_system() {
    let spec = OcpSpec::new(Arc::new(default_track(LanePreset::D1)), CostVariant::D1Stage).with_tolerance(TOL);
    let theta = Theta::Stage { w_d: 1.3, w_theta: 0.7, w_rate: 1.1, d_bar: -0.3 };
    let (nlp, sol) = solved(&spec, &VehicleState::new(0.05, 0.01, 500.0, 0.3, -0.01, 0.01), &theta);
    assert!(sol.active.iter().all(|a| !a));
    let kkt = build_kkt_system(&sol, &nlp, &theta).unwrap();
    let n = kkt.dim();
    let mut m = DMatrix::zeros(n, n);
    for &(i, j, v) in &kkt.dfdz {
        m[(i, j)] += v;
    }
    let mut zbar = DVector::zeros(n);
    zbar[kkt.u0_index()] = 1.0;
    let y = m.transpose().lu().solve(&zbar).unwrap();
    let adj = kkt.adjoint_vjp(zbar.as_slice()).unwrap();
    for (c, col) in kkt.dfdweights.iter().enumerate() {
        let dense = -col.iter().map(|&(row, v)| v * y[row]).sum::<f64>();
        assert!((dense - adj.weights_bar[c]).abs() <= 1e-8, "weight {c}: {dense} vs {}", adj.weights_bar[c]);
    }
    for i in 0..NX {
        let dense = -y[kkt.num_primal() + i];
        assert!((dense - adj.s_bar[i]).abs() <= 1e-8);
    }
}

#[test]
fn cost_scaling_leaves_policy_unchanged() {
    let spec = OcpSpec::new(Arc::new(default_track(LanePreset::D1)), CostVariant::D1Stage).with_tolerance(1e-12);
    let s0 = VehicleState::new(0.1, 0.02, 640.0, -0.5, 0.03, 0.0);
    let base = Theta::Stage { w_d: 1.0, w_theta: 2.0, w_rate: 0.5, d_bar: 0.2 };
    let (nlp, sol) = solved(&spec, &s0, &base);
    let jac = policy_jacobians(&sol, &nlp, &base).unwrap();
    for c in [0.1, 3.0, 25.0] {
        let scaled = Theta::Stage { w_d: c, w_theta: 2.0 * c, w_rate: 0.5 * c, d_bar: 0.2 };
        let (nlp_c, sol_c) = solved(&spec, &s0, &scaled);
        assert!((sol_c.u0() - sol.u0()).abs() <= 1e-8);
        let jac_c = policy_jacobians(&sol_c, &nlp_c, &scaled).unwrap();
        for i in 0..NX {
            assert!((jac_c.du0_ds[i] - jac.du0_ds[i]).abs() <= 1e-8, "s[{i}] at c = {c}");
        }
    }
}
