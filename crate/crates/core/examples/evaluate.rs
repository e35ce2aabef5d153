//! Validation metrics of the expert-parameter and untrained static
//! policies on fresh D1 demonstrations.
//!
//! `cargo run --release --example evaluate`

use std::sync::Arc;

use mpc_bco::datasets::{generate_demos, ExpertSpec};
use mpc_bco::metrics::{evaluate, EvalConfig};
use mpc_bco::ocp::{CostVariant, OcpSpec};
use mpc_bco::policy::{HierarchicalPolicy, StaticRawParams};
use mpc_bco::track::{default_track, LanePreset};

fn main() {
    let track = Arc::new(default_track(LanePreset::D1));
    let demos = generate_demos(track.clone(), &ExpertSpec::d1(3).noise_free(), 2).expect("expert run");
    let w = track.lane_width();
    for (name, raw) in [("expert parameters", StaticRawParams::from_projected(1.0, 1.0, 1.0, -0.4, w)), ("untrained", StaticRawParams::initial(w))] {
        let mut p = HierarchicalPolicy::static_d1(OcpSpec::new(track.clone(), CostVariant::D1Stage), raw);
        let r = evaluate(&mut p, &demos, &track, &EvalConfig { n_subtraj: 10, ..EvalConfig::default() }).expect("evaluate");
        println!(
            "{name:<18} imitation {:.3e} m² (rms {:.4} m), violations {}, comfort {:.3} (demo {:.3}), min TLC {:.2} s",
            r.imitation_sum_sq, r.imitation_rms, r.safety_violations, r.comfort, r.reference_comfort, r.tlc_min
        );
    }
}
