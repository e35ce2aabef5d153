//! Synthetic expert demonstrations for both lane presets, saved as
//! per-lap CSV files.
//!
//! `cargo run --release --example gen_demos -- [out_dir] [laps]`

use std::path::PathBuf;
use std::sync::Arc;

use mpc_bco::datasets::{generate_demos, save_demos, ExpertSpec};
use mpc_bco::track::{default_track, LanePreset};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "demos".into()));
    let laps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    for (name, preset, expert) in [("d1", LanePreset::D1, ExpertSpec::d1(0)), ("d2", LanePreset::D2, ExpertSpec::d2(0))] {
        let demos = generate_demos(Arc::new(default_track(preset)), &expert, laps).expect("expert run");
        let files = save_demos(out.join(name), &demos).expect("save");
        for d in &demos {
            let mean_d = d.states.iter().map(|s| s.d).sum::<f64>() / d.states.len() as f64;
            let max_d = d.states.iter().map(|s| s.d.abs()).fold(0.0, f64::max);
            println!("{name} lap {}: {} steps, mean d {mean_d:+.3} m, max |d| {max_d:.3} m", d.meta.lap, d.steps());
        }
        println!("wrote {} files to {}", files.len(), out.join(name).display());
    }
}
