//! Recovers the static D1 cost parameters of a noise-free synthetic expert
//! by closed-loop behavioral cloning.
//!
//! ```text
//! cargo run --release --example train_d1_static -- [laps] [epochs]
//! ```

use std::sync::Arc;
use std::time::Instant;

use mpc_bco::datasets::{generate_demos, ExpertSpec};
use mpc_bco::ocp::{CostVariant, OcpSpec};
use mpc_bco::policy::{project_static, HierarchicalPolicy, StaticRawParams};
use mpc_bco::track::{default_track, LanePreset};
use mpc_bco::trainer::{train_mpc_bco, TrainConfig};

fn main() {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let laps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);

    let track = Arc::new(default_track(LanePreset::D1));
    let t0 = Instant::now();
    let demos = generate_demos(track.clone(), &ExpertSpec::d1(0).noise_free(), laps + 1).expect("expert demos");
    println!("generated {} laps in {:.1?}", demos.len(), t0.elapsed());
    let (train, val) = demos.split_at(laps);

    let spec = OcpSpec::new(track, CostVariant::D1Stage);
    let mut policy = HierarchicalPolicy::static_d1(spec, StaticRawParams::initial(4.5));
    let cfg = TrainConfig { epochs, ..TrainConfig::for_kind("static-d1") };
    let t0 = Instant::now();
    let report = train_mpc_bco(&mut policy, train, val, &cfg).expect("training");
    for r in &report.history {
        println!("epoch {:3}  train J {:9.5}  val J {:9.5}  val rms {:.4} m  |g| {:.3e}", r.epoch, r.train_j, r.val_j, r.val_rms, r.grad_norm);
    }
    let raw: [f64; 4] = report.params.clone().try_into().unwrap();
    let (theta, _) = project_static(&StaticRawParams { raw }, 4.5);
    println!("learned (W_d, W_theta, W_rate, d_bar) = {:?} in {:.1?}", theta.to_vec(), t0.elapsed());
}
