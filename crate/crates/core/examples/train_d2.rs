//! Learns the curvature-dependent offset network on the D2 task: supervised
//! pretraining on 2 s windows, then closed-loop refinement.
//!
//! ```text
//! cargo run --release --example train_d2 -- [train_laps] [epochs]
//! ```

use std::sync::Arc;
use std::time::Instant;

use mpc_bco::datasets::{generate_demos, ExpertSpec};
use mpc_bco::ocp::{CostVariant, OcpSpec};
use mpc_bco::policy::{DbarNet, HierarchicalPolicy};
use mpc_bco::track::{default_track, LanePreset};
use mpc_bco::trainer::{evaluate_windows, make_windows, pretrain_sl_dbar, train_mpc_bco, SlConfig, TrainConfig};

fn main() {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let laps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);

    let track = Arc::new(default_track(LanePreset::D2));
    let demos = generate_demos(track.clone(), &ExpertSpec::d2(1), laps + 2).expect("expert demos");
    let (train, val) = demos.split_at(laps);

    let mut net = DbarNet::random(track.lane_width(), true, 0);
    let t0 = Instant::now();
    let sl = pretrain_sl_dbar(&mut net, &track, train, &SlConfig::default()).expect("pretraining");
    println!("SL: {} samples, mse {:.4} -> {:.4} in {} epochs ({:.1?})", sl.samples, sl.mse[0], sl.mse[sl.best_epoch], sl.mse.len() - 1, t0.elapsed());

    let spec = OcpSpec::new(track.clone(), CostVariant::D2Terminal);
    let mut policy = HierarchicalPolicy::mlp_d2(spec, net);
    let cfg = TrainConfig { epochs, ..TrainConfig::for_kind("mlp-d2") };
    let windows = make_windows(val, 100, 0.1);
    let (j_sl, rms_sl) = evaluate_windows(&mut policy, &track, &windows, &cfg).expect("evaluation");
    println!("SL policy: val J {j_sl:.4} (rms {rms_sl:.4} m)");

    let t0 = Instant::now();
    let report = train_mpc_bco(&mut policy, train, val, &cfg).expect("training");
    for r in &report.history {
        println!("epoch {:3}  train J {:9.5}  val J {:9.5}  val rms {:.4} m  |g| {:.3e}", r.epoch, r.train_j, r.val_j, r.val_rms, r.grad_norm);
    }
    let best = report.best_val();
    println!("MPC-BCO: val J {best:.4}, {:.1}% below SL ({:.1?})", 100.0 * (1.0 - best / j_sl), t0.elapsed());
}
