//! Trains MPC-BCO and the pure-network baseline on the same D2 data and
//! compares imitation, lane violations and comfort on held-out laps, plus
//! baseline stress rollouts started near the lane edge before curves.
//!
//! ```text
//! cargo run --release --example compare_baseline -- [epochs]
//! ```

use std::sync::Arc;

use mpc_bco::datasets::{generate_demos, ExpertSpec};
use mpc_bco::metrics::{evaluate, stress_starts, stress_test, EvalConfig, EvalReport};
use mpc_bco::ocp::{CostVariant, OcpSpec};
use mpc_bco::policy::{BaselinePolicy, DbarNet, HierarchicalPolicy};
use mpc_bco::track::{default_track, LanePreset};
use mpc_bco::trainer::{pretrain_sl_dbar, train_baseline_bco, train_mpc_bco, SlConfig, TrainConfig};

fn row(name: &str, r: &EvalReport) {
    println!(
        "{name:10} imitation {:8.4} m^2 ({:.4} m rms)  violations {:4}  comfort {:8.3} (demo {:8.3})  failures {}",
        r.imitation_sum_sq, r.imitation_rms, r.safety_violations, r.comfort, r.reference_comfort, r.failures
    );
}

fn main() {
    env_logger::init();
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(50);
    let track = Arc::new(default_track(LanePreset::D2));
    let demos = generate_demos(track.clone(), &ExpertSpec::d2(1), 10).expect("expert demos");
    let (train, val) = demos.split_at(8);
    let cfg_eval = EvalConfig { n_subtraj: 20, seed: 1, ..Default::default() };

    let mut net = DbarNet::random(track.lane_width(), true, 0);
    pretrain_sl_dbar(&mut net, &track, train, &SlConfig::default()).expect("pretraining");
    let mut mpc = HierarchicalPolicy::mlp_d2(OcpSpec::new(track.clone(), CostVariant::D2Terminal), net);
    train_mpc_bco(&mut mpc, train, val, &TrainConfig { epochs: epochs.min(10), ..TrainConfig::for_kind("mlp-d2") }).expect("mpc training");

    let rate = OcpSpec::new(track.clone(), CostVariant::D2Terminal).bounds.delta_rate;
    let mut base = BaselinePolicy::random(&track, rate, 0);
    let report = train_baseline_bco(&mut base, &track, train, val, &TrainConfig { epochs, ..TrainConfig::for_kind("baseline") })
        .expect("baseline training");
    println!("baseline: val J {:.4} -> {:.4} (best epoch {})", report.initial_val(), report.best_val(), report.best_epoch);

    let r_mpc = evaluate(&mut mpc, val, &track, &cfg_eval).expect("eval");
    let r_base = evaluate(&mut base, val, &track, &cfg_eval).expect("eval");
    row("MPC-BCO", &r_mpc);
    row("baseline", &r_base);

    let stress = stress_test(&mut base, &track, &stress_starts(&track, 20), 10.0);
    println!("baseline stress: {} violations, {} aborted, max |d| {:.2} m", stress.violations, stress.failures, stress.max_abs_d);
}
