//! Closed-loop lap of the untrained static policy, written as CSV.
//!
//! `cargo run --release --example rollout_csv -- [out.csv]`

use std::sync::Arc;

use mpc_bco::closed_loop::{rollout, RolloutConfig};
use mpc_bco::ocp::{CostVariant, OcpSpec};
use mpc_bco::policy::{HierarchicalPolicy, StaticRawParams};
use mpc_bco::track::{default_track, LanePreset};
use mpc_bco::vehicle::{VehicleParams, VehicleState};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "rollout.csv".into());
    let track = Arc::new(default_track(LanePreset::D1));
    let spec = OcpSpec::new(track.clone(), CostVariant::D1Stage);
    let mut policy = HierarchicalPolicy::static_d1(spec, StaticRawParams::initial(track.lane_width()));
    // one lap at constant speed, rounded down to whole steps
    let duration = (track.total_length() / VehicleParams::default().v_x * 10.0).floor() / 10.0;
    let tape = rollout(&mut policy, &track, &VehicleState::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0), &RolloutConfig::new(duration)).expect("rollout");
    tape.save_csv(&out).expect("write csv");
    let iters: usize = tape.solver.iter().flatten().map(|s| s.iterations).sum();
    println!(
        "{} steps, max |d| {:.3} m (half width {:.2}), {} active-set changes, {:.2} SQP iterations per step; wrote {out}",
        tape.steps(),
        tape.max_abs_d(),
        track.half_width(),
        tape.active_set_changes(),
        iters as f64 / tape.steps() as f64
    );
}
