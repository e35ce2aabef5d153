//! Implicit derivatives of the first MPC control with respect to the cost
//! parameters and the initial state, next to central differences.
//!
//! `cargo run --release --example sensitivities`

use std::sync::Arc;

use mpc_bco::ocp::{solve, transcribe, CostVariant, OcpSpec, Theta};
use mpc_bco::sensitivity::policy_jacobians;
use mpc_bco::track::{default_track, LanePreset};
use mpc_bco::vehicle::{VehicleState, NX};

fn main() {
    let track = Arc::new(default_track(LanePreset::D1));
    let spec = OcpSpec::new(track, CostVariant::D1Stage).with_tolerance(1e-11);
    let s0 = VehicleState::new(0.1, 0.02, 75.0, 0.8, -0.01, 0.003);
    let theta = Theta::Stage { w_d: 1.3, w_theta: 0.7, w_rate: 1.1, d_bar: -0.4 };
    let u0 = |s: &VehicleState, th: &Theta| solve(&transcribe(&spec, s, th).unwrap(), None).unwrap().u0();

    let nlp = transcribe(&spec, &s0, &theta).unwrap();
    let sol = solve(&nlp, None).unwrap();
    let jac = policy_jacobians(&sol, &nlp, &theta).unwrap();
    println!("KKT condition estimate {:.2e}", jac.condition);

    let h = 1e-5;
    let names = ["w_d", "w_theta", "w_rate", "d_bar"];
    println!("parameter   adjoint          central difference");
    let base = theta.to_vec();
    for (i, name) in names.iter().enumerate() {
        let (mut p, mut m) = (base.clone(), base.clone());
        p[i] += h;
        m[i] -= h;
        let fd = (u0(&s0, &Theta::from_slice(theta.variant(), &p)) - u0(&s0, &Theta::from_slice(theta.variant(), &m))) / (2.0 * h);
        println!("{name:<10} {:+.9e}  {fd:+.9e}", jac.du0_dtheta[i]);
    }
    let states = ["v_y", "psi_dot", "sigma", "d", "theta_e", "delta"];
    for i in 0..NX {
        let (mut p, mut m) = (s0.to_array(), s0.to_array());
        p[i] += h;
        m[i] -= h;
        let fd = (u0(&VehicleState::from_array(&p), &theta) - u0(&VehicleState::from_array(&m), &theta)) / (2.0 * h);
        println!("{:<10} {:+.9e}  {fd:+.9e}", states[i], jac.du0_ds[i]);
    }
}
