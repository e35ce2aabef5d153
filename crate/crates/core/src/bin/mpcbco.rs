use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mpc_bco::closed_loop::SolverLog;
use mpc_bco::experiment::{self, EvalArgs, ExportArgs, GenDemosArgs, RunManifest, TrainArgs, TrainVariant};
use serde_json::json;

/// Differentiable-MPC imitation learning for lane keeping.
///
/// Exit codes: 0 ok, 1 usage error, 2 runtime failure, 3 grad-check failure.
#[derive(Parser, Debug)]
#[command(name = "mpcbco", version)]
struct Cli {
    /// Stream per-step solver diagnostics of every rollout to this CSV file.
    #[arg(long, global = true, value_name = "CSV")]
    solver_log: Option<PathBuf>,
    /// Use the offset network's raw output as d̄ instead of squashing it into the lane.
    #[arg(long, global = true)]
    no_dbar_squash: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    D1,
    D2,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::D1 => "d1",
            Preset::D2 => "d2",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    D1Static,
    D2Sl,
    D2Bco,
    Baseline,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a preset track table.
    GenTrack {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the synthetic expert and save one CSV per lap.
    GenDemos {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, default_value_t = 10)]
        laps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reference noise std (m); 0 gives a noise-free expert.
        #[arg(long)]
        noise_std: Option<f64>,
        /// Constant offset of the d1 expert (m).
        #[arg(long, allow_hyphen_values = true)]
        d_bar_star: Option<f64>,
        /// Inner-curve offset of the d2 expert (m).
        #[arg(long)]
        r_off: Option<f64>,
        #[arg(long)]
        track: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on saved demonstrations.
    Train {
        #[arg(value_enum)]
        variant: Variant,
        #[arg(long)]
        demos: PathBuf,
        /// Validation laps; by default the last --val-laps of --demos are held out.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        val_laps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Starting checkpoint (e.g. the d2-sl result for d2-bco).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        track: Option<PathBuf>,
    },
    /// Closed-loop metrics of a checkpoint on random validation sub-trajectories.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_subtraj: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        track: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lap-trace and loss-curve CSVs for plotting.
    ExportPlots {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value_t = 0)]
        lap: usize,
        /// Trained checkpoint.
        #[arg(long)]
        after: PathBuf,
        /// Checkpoint before training; the untrained policy of the same kind if omitted.
        #[arg(long)]
        before: Option<PathBuf>,
        /// Training output directory to turn into loss_curve.csv.
        #[arg(long)]
        train_dir: Option<PathBuf>,
        #[arg(long)]
        track: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference and invariance checks; exit code 3 on any failure.
    GradCheck {
        /// Full-size instance counts instead of the quick suite.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "grad_check")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode, experiment::ExperimentError> {
    let solver_log = cli.solver_log.as_ref().map(SolverLog::create).transpose()?;
    let squash = !cli.no_dbar_squash;
    let code = match cli.cmd {
        Cmd::GenTrack { preset, out } => {
            let started = std::time::Instant::now();
            let track = experiment::preset_track(experiment::parse_preset(preset.name())?, None)?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).map(PathBuf::from).unwrap_or_else(|| ".".into());
            std::fs::create_dir_all(&dir)?;
            track.save(&out)?;
            let mut m = RunManifest::new("gen-track", json!({ "preset": preset.name(), "out": out }), None);
            m.output(&out);
            m.summary = json!({ "segments": track.segments().len(), "length_m": track.total_length(), "lane_width_m": track.lane_width() });
            m.write(&dir, started)?;
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Cmd::GenDemos { preset, laps, seed, noise_std, d_bar_star, r_off, track, out } => {
            let m = experiment::gen_demos(&GenDemosArgs { preset: preset.name().into(), laps, seed, noise_std, d_bar_star, r_off, track, out: out.clone() })?;
            println!("wrote {} laps to {}", m.summary["laps"], out.display());
            ExitCode::SUCCESS
        }
        Cmd::Train { variant, demos, val, val_laps, out, epochs, lr, seed, init, track } => {
            let variant = match variant {
                Variant::D1Static => TrainVariant::D1Static,
                Variant::D2Sl => TrainVariant::D2Sl,
                Variant::D2Bco => TrainVariant::D2Bco,
                Variant::Baseline => TrainVariant::Baseline,
            };
            let m = experiment::train(&TrainArgs { variant, demos, val, val_laps, out, epochs, lr, seed, init, squash, track, solver_log: solver_log.clone() })?;
            println!("{}", serde_json::to_string_pretty(&m.summary)?);
            ExitCode::SUCCESS
        }
        Cmd::Eval { policy, demos, n_subtraj, seed, track, out } => {
            let (m, _) = experiment::eval(&EvalArgs { policy, demos, n_subtraj, seed, track, out, solver_log: solver_log.clone() })?;
            println!("{}", serde_json::to_string_pretty(&m.summary)?);
            ExitCode::SUCCESS
        }
        Cmd::ExportPlots { demos, lap, after, before, train_dir, track, out } => {
            let m = experiment::export_plots(&ExportArgs { demos, lap, after, before, train_dir, track, out, solver_log: solver_log.clone() })?;
            for o in &m.outputs {
                println!("wrote {o}");
            }
            ExitCode::SUCCESS
        }
        Cmd::GradCheck { full, seed, out } => {
            let (_, results) = experiment::grad_check(full, seed, &out)?;
            for r in &results {
                println!("{}", r.line());
            }
            if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
    };
    if let Some(l) = &solver_log {
        l.flush()?;
    }
    Ok(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
