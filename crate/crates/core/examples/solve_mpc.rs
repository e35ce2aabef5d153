//! One MPC solve from a state off the centerline, printing the solver
//! record and the predicted lateral offsets.
//!
//! `cargo run --release --example solve_mpc -- [d0] [d_bar]`

use std::sync::Arc;
use std::time::Instant;

use mpc_bco::ocp::{mpc_control, CostVariant, OcpSpec, Theta};
use mpc_bco::track::{default_track, LanePreset};
use mpc_bco::vehicle::{VehicleState, D};

fn main() {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>().expect("numeric argument"));
    let d0 = args.next().unwrap_or(1.5);
    let d_bar = args.next().unwrap_or(-0.4);

    let track = Arc::new(default_track(LanePreset::D1));
    let spec = OcpSpec::new(track, CostVariant::D1Stage);
    // entering the first curve
    let s0 = VehicleState::new(0.0, 0.0, 70.0, d0, 0.02, 0.0);
    let theta = Theta::Stage { w_d: 1.0, w_theta: 1.0, w_rate: 1.0, d_bar };

    let t = Instant::now();
    let (u0, sol) = mpc_control(&spec, &s0, &theta, None).expect("solve");
    println!("u0 = {u0:.6} rad/s in {:.1?}", t.elapsed());
    println!(
        "converged {} after {} SQP iterations ({} QP iterations), KKT residual {:.2e}, {} active rows",
        sol.converged,
        sol.stats.iterations,
        sol.stats.qp_iterations,
        sol.kkt_residual,
        sol.active_count()
    );
    println!("k    d [m]     delta_rate [rad/s]");
    for (k, x) in sol.x.iter().enumerate() {
        let u = sol.u.get(k).map(|u| format!("{u:+.5}")).unwrap_or_default();
        println!("{k:2} {:+.4}  {u}", x[D]);
    }
}
