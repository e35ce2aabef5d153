use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::track::{default_track, LanePreset, Segment, TrackSpec};
use crate::vehicle::{step_rk4, VehicleState, D};

fn straight_spec(variant: CostVariant) -> OcpSpec {
    OcpSpec::new(Arc::new(TrackSpec::straight(2000.0, 4.5).unwrap()), variant)
}

fn d1(w_d: f64, w_theta: f64, w_rate: f64, d_bar: f64) -> Theta {
    Theta::Stage { w_d, w_theta, w_rate, d_bar }
}

#[test]
fn transcription_counts() {
    let spec = straight_spec(CostVariant::D1Stage);
    let nlp = transcribe(&spec, &VehicleState::default(), &d1(1.0, 1.0, 1.0, 0.0)).unwrap();
    assert_eq!(nlp.num_primal(), 146);
    assert_eq!(nlp.num_equalities(), 126);
    assert_eq!(spec.num_primal(), 146);
    assert_eq!(nlp.num_ineqs(), 8 * 20 + 2 * 20);
}

#[test]
fn objective_zero_cases() {
    let spec = straight_spec(CostVariant::D1Stage);
    let nlp = transcribe(&spec, &VehicleState::default(), &d1(1.0, 2.0, 3.0, 0.0)).unwrap();
    assert_eq!(nlp.objective(&vec![0.0; nlp.num_primal()]), 0.0);

    let spec2 = straight_spec(CostVariant::D2Terminal);
    let nlp2 = transcribe(&spec2, &VehicleState::default(), &Theta::Terminal { d_bar: 0.7 }).unwrap();
    let mut w = vec![0.0; nlp2.num_primal()];
    w[nlp2.x_index(20, D)] = 0.7;
    assert_eq!(nlp2.objective(&w), 0.0);
}

#[test]
fn invalid_specs_rejected() {
    let mut spec = straight_spec(CostVariant::D1Stage);
    spec.bounds.delta = Interval { lower: 0.3, upper: -0.3 };
    assert!(matches!(
        transcribe(&spec, &VehicleState::default(), &d1(1.0, 1.0, 1.0, 0.0)),
        Err(OcpError::InvalidSpec(_))
    ));
    let mut spec = straight_spec(CostVariant::D1Stage);
    spec.horizon = 1;
    assert!(transcribe(&spec, &VehicleState::default(), &d1(1.0, 1.0, 1.0, 0.0)).is_err());
    let spec = straight_spec(CostVariant::D1Stage);
    assert!(transcribe(&spec, &VehicleState::default(), &Theta::Terminal { d_bar: 0.0 }).is_err());
    let far = VehicleState::new(0.0, 0.0, 0.0, 5.0, 0.0, 0.0);
    assert!(matches!(
        transcribe(&spec, &far, &d1(1.0, 1.0, 1.0, 0.0)),
        Err(OcpError::StartOutsideLane { .. })
    ));
}

#[test]
fn symmetric_equilibrium_stays_put() {
    let spec = straight_spec(CostVariant::D1Stage);
    let (u0, sol) = mpc_control(&spec, &VehicleState::centered(10.0), &d1(1.0, 1.0, 1.0, 0.0), None).unwrap();
    assert_eq!(u0, 0.0);
    assert!(sol.converged);
    for x in &sol.x {
        assert_eq!(x[D], 0.0);
        assert_eq!(x[crate::vehicle::THETA], 0.0);
    }
}

#[test]
fn regulates_toward_centerline() {
    let spec = straight_spec(CostVariant::D1Stage);
    let s0 = VehicleState::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let (_, sol) = mpc_control(&spec, &s0, &d1(1.0, 1.0, 1.0, 0.0), None).unwrap();
    assert!(sol.converged);
    // re-simulate the optimal controls independently of the solver
    let mut x = s0;
    for &u in &sol.u {
        x = step_rk4(&x, u, &spec.vehicle, spec.track.as_ref(), spec.dt).unwrap();
    }
    assert!((x.d - sol.x[20][D]).abs() < 1e-6);
    assert!(x.d.abs() < 0.25 * s0.d.abs(), "d_N = {}", x.d);
}

fn curve_away_spec() -> OcpSpec {
    // right-hand arc: centre of curvature on the d < 0 side
    let track = TrackSpec::new("arc", vec![Segment::new(30.0, 0.0), Segment::new(400.0, -1.0 / 60.0)], 4.5).unwrap();
    OcpSpec::new(Arc::new(track), CostVariant::D1Stage)
}

#[test]
fn lane_bound_activates_near_outer_edge() {
    let spec = curve_away_spec();
    let half = spec.half_width();
    let s0 = VehicleState::new(0.0, 0.0, 20.0, 0.9 * half, 0.02, 0.0);
    let (_, sol) = mpc_control(&spec, &s0, &d1(0.05, 1.0, 1.0, 0.99 * half), None).unwrap();
    assert!(sol.converged);
    let nlp = transcribe(&spec, &s0, &d1(0.05, 1.0, 1.0, 0.99 * half)).unwrap();
    let lane_active = nlp.ineqs.iter().zip(&sol.mu).any(|(q, m)| q.lane && *m > 0.0);
    assert!(lane_active, "expected an active lane row");
    let max_d = sol.x.iter().map(|x| x[D].abs()).fold(0.0, f64::max);
    assert!(max_d <= half + 1e-8, "max |d| = {max_d}");
}

#[test]
fn kkt_residual_behaviour() {
    let spec = straight_spec(CostVariant::D1Stage);
    let theta = d1(1.0, 1.0, 1.0, 0.0);
    let s0 = VehicleState::new(0.1, 0.02, 0.0, 0.8, -0.03, 0.01);
    let nlp = transcribe(&spec, &s0, &theta).unwrap();
    let sol = solve(&nlp, None).unwrap();
    assert!(kkt_residual(&sol, &nlp) <= 1e-6);
    let mut bad = sol.clone();
    bad.u[5] += 0.1;
    assert!(kkt_residual(&bad, &nlp) > 1e-3);

    // equilibrium trajectory with zero multipliers
    let eq = VehicleState::centered(0.0);
    let nlp0 = transcribe(&spec, &eq, &theta).unwrap();
    let x = nlp0.simulate(&[0.0; 20]).unwrap();
    let z = PrimalDualSolution {
        x,
        u: vec![0.0; 20],
        lambda: vec![[0.0; 6]; 21],
        mu: vec![0.0; nlp0.num_ineqs()],
        active: vec![false; nlp0.num_ineqs()],
        relaxed: false,
        kkt_residual: 0.0,
        converged: true,
        stats: SolverStats::default(),
    };
    assert!(kkt_residual(&z, &nlp0) <= 1e-12);
}

#[test]
fn warm_resolve_is_immediate() {
    let spec = OcpSpec::new(Arc::new(default_track(LanePreset::D1)), CostVariant::D1Stage);
    let theta = d1(1.0, 1.0, 1.0, -0.4);
    let s0 = VehicleState::new(0.0, 0.0, 75.0, 0.3, 0.01, 0.0);
    let nlp = transcribe(&spec, &s0, &theta).unwrap();
    let sol = solve(&nlp, None).unwrap();
    let again = solve(&nlp, Some(&sol)).unwrap();
    assert!(again.stats.iterations <= 2, "{} iterations", again.stats.iterations);
    assert!((again.u0() - sol.u0()).abs() < 1e-8);
}

#[test]
fn relaxed_start_outside_lane() {
    let spec = curve_away_spec();
    let half = spec.half_width();
    let s0 = VehicleState::new(0.0, 0.0, 25.0, half + 0.3, 0.08, 0.0);
    let nlp = transcribe(&spec, &s0, &d1(1.0, 1.0, 1.0, 0.0)).unwrap();
    let sol = solve(&nlp, None).unwrap();
    assert!(sol.converged);
    assert!(sol.relaxed);
    assert!(kkt_residual(&sol, &nlp) <= 1e-6);
}

fn random_instance(rng: &mut ChaCha8Rng, spec: &OcpSpec) -> (VehicleState, Theta) {
    let half = spec.half_width();
    let s0 = VehicleState::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.1..0.1),
        rng.random_range(0.0..1200.0),
        rng.random_range(-0.8..0.8) * half,
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    );
    let theta = match spec.cost_variant {
        CostVariant::D1Stage => d1(
            rng.random_range(0.2..3.0),
            rng.random_range(0.2..3.0),
            rng.random_range(0.2..3.0),
            rng.random_range(-0.8..0.8) * half,
        ),
        CostVariant::D2Terminal => Theta::Terminal { d_bar: rng.random_range(-0.8..0.8) * half },
    };
    (s0, theta)
}

#[test]
fn converged_solutions_respect_boxes_and_merit_descent() {
    let track = Arc::new(default_track(LanePreset::D1));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for variant in [CostVariant::D1Stage, CostVariant::D2Terminal] {
        let spec = OcpSpec::new(track.clone(), variant);
        for _ in 0..25 {
            let (s0, theta) = random_instance(&mut rng, &spec);
            let nlp = transcribe(&spec, &s0, &theta).unwrap();
            let sol = solve(&nlp, None).unwrap();
            assert!(sol.converged);
            let w = nlp.pack(&sol.x, &sol.u);
            for (q, m) in nlp.ineqs.iter().zip(&sol.mu) {
                let h = q.eval(w[q.var]);
                assert!(h <= 1e-8, "box violated by {h}");
                assert!(*m >= 0.0);
                assert!((m * h).abs() <= 1e-8);
            }
            assert!(spec.bounds.delta_rate.contains(sol.u0(), 1e-12));
            for (before, after) in &sol.stats.merit_steps {
                assert!(*after <= before + 1e-12 * (1.0 + before.abs()), "merit increased {before} -> {after}");
            }
            assert_eq!(sol.x[0], s0.to_array());
        }
    }
}

#[test]
fn mirror_symmetry_of_first_control() {
    let track = default_track(LanePreset::D1);
    let spec = OcpSpec::new(Arc::new(track.clone()), CostVariant::D1Stage).with_tolerance(1e-10);
    let mirror = OcpSpec::new(Arc::new(track.mirrored()), CostVariant::D1Stage).with_tolerance(1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let (s0, theta) = random_instance(&mut rng, &spec);
        let Theta::Stage { w_d, w_theta, w_rate, d_bar } = theta else { unreachable!() };
        let (u, _) = mpc_control(&spec, &s0, &theta, None).unwrap();
        let (um, _) = mpc_control(&mirror, &s0.mirrored(), &d1(w_d, w_theta, w_rate, -d_bar), None).unwrap();
        assert!((u + um).abs() <= 1e-6, "{u} vs {um}");
    }
}

#[test]
fn receding_horizon_warm_start() {
    let spec = OcpSpec::new(Arc::new(default_track(LanePreset::D1)), CostVariant::D1Stage);
    let mut mpc = Mpc::new(spec.clone());
    let theta = d1(1.0, 1.0, 1.0, -0.4);
    let mut s = VehicleState::centered(60.0);
    let mut cold_iters = 0;
    let mut warm_iters = 0;
    for t in 0..40 {
        let (_, sol) = mpc.solve(&s, theta.weights()).unwrap();
        assert!(sol.converged);
        if t == 0 {
            cold_iters = sol.stats.iterations;
        } else {
            warm_iters = warm_iters.max(sol.stats.iterations);
        }
        s = step_rk4(&s, sol.u0(), &spec.vehicle, spec.track.as_ref(), spec.dt).unwrap();
    }
    assert!(warm_iters <= cold_iters.max(6), "warm {warm_iters} cold {cold_iters}");
}
