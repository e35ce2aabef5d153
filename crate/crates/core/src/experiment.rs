//! File-level experiment steps behind the `mpcbco` command line: each step
//! reads and writes plain CSV/text artifacts and leaves a JSON run
//! manifest in its output directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::closed_loop::{rollout, RolloutConfig, RolloutError, SolverLog};
use crate::datasets::{self, generate_demos, load_demos, save_demos, DatasetError, DemoTrajectory, ExpertSpec, ExpertVariant};
use crate::gradcheck::{run_suite, CheckOutcome, SuiteSize};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::ocp::{CostVariant, OcpSpec};
use crate::policy::{
    policy_from_checkpoint, BaselinePolicy, Checkpoint, DbarNet, HierarchicalPolicy, Policy, PolicyError, StaticRawParams,
    CHECKPOINT_VERSION,
};
use crate::track::{default_track, LanePreset, TrackError, TrackSpec};
use crate::trainer::{pretrain_sl_dbar, train_baseline_bco, train_mpc_bco, SlConfig, TrainConfig, TrainReport, TrainerError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Record of one run: what was asked for, with which seed and code
/// versions, and what was produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub versions: Value,
    pub started_unix: u64,
    pub elapsed_s: f64,
    pub outputs: Vec<String>,
    pub summary: Value,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            versions: json!({
                "mpc-bco": env!("CARGO_PKG_VERSION"),
                "demo_format": datasets::DEMO_VERSION,
                "checkpoint_format": CHECKPOINT_VERSION,
            }),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_s: 0.0,
            outputs: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn output(&mut self, p: impl AsRef<Path>) {
        self.outputs.push(p.as_ref().display().to_string());
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&mut self, dir: &Path, started: std::time::Instant) -> Result<PathBuf> {
        self.elapsed_s = started.elapsed().as_secs_f64();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

pub fn preset_track(preset: LanePreset, custom: Option<&Path>) -> Result<Arc<TrackSpec>> {
    Ok(Arc::new(match custom {
        Some(p) => TrackSpec::load(p)?,
        None => default_track(preset),
    }))
}

/// Explicit track file, else the `track.txt` saved next to the
/// demonstrations, else the preset.
pub fn resolve_track(preset: LanePreset, explicit: Option<&Path>, demos: &Path) -> Result<Arc<TrackSpec>> {
    let saved = demos.join("track.txt");
    match explicit {
        Some(p) => preset_track(preset, Some(p)),
        None if saved.is_file() => preset_track(preset, Some(&saved)),
        None => preset_track(preset, None),
    }
}

/// D1 lane for the static policy, D2 for everything else.
pub fn preset_for_kind(kind: &str) -> LanePreset {
    if kind == "static-d1" || kind == "d1" {
        LanePreset::D1
    } else {
        LanePreset::D2
    }
}

fn check_lane(track: &TrackSpec, demos: &[DemoTrajectory]) -> Result<()> {
    for d in demos {
        if d.meta.lane_width > 0.0 && (d.meta.lane_width - track.lane_width()).abs() > 1e-9 {
            return Err(ExperimentError::Input(format!(
                "demonstrations were recorded on a {} m lane but the track has {} m",
                d.meta.lane_width,
                track.lane_width()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDemosArgs {
    pub preset: String,
    pub laps: usize,
    pub seed: u64,
    pub noise_std: Option<f64>,
    pub d_bar_star: Option<f64>,
    pub r_off: Option<f64>,
    pub track: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn gen_demos(args: &GenDemosArgs) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let preset = parse_preset(&args.preset)?;
    let track = preset_track(preset, args.track.as_deref())?;
    let mut expert = if preset == LanePreset::D1 { ExpertSpec::d1(args.seed) } else { ExpertSpec::d2(args.seed) };
    if let Some(n) = args.noise_std {
        expert.noise_std = n;
    }
    match (&mut expert.variant, args.d_bar_star, args.r_off) {
        (ExpertVariant::D1ConstOffset { d_bar_star }, Some(v), _) => *d_bar_star = v,
        (ExpertVariant::D2CurvatureDependent { r_off }, _, Some(v)) => *r_off = v,
        (_, None, None) => {}
        _ => return Err(ExperimentError::Input("--d-bar-star applies to d1, --r-off to d2".into())),
    }
    let demos = generate_demos(track.clone(), &expert, args.laps)?;
    let mut m = RunManifest::new("gen-demos", serde_json::to_value(args)?, Some(args.seed));
    for p in save_demos(&args.out, &demos)? {
        m.output(p);
    }
    let track_path = args.out.join("track.txt");
    track.save(&track_path)?;
    m.output(&track_path);
    m.summary = json!({ "laps": demos.len(), "steps_per_lap": demos.iter().map(|d| d.steps()).collect::<Vec<_>>(), "expert": format!("{:?}", expert.variant) });
    m.write(&args.out, started)?;
    Ok(m)
}

pub fn parse_preset(s: &str) -> Result<LanePreset> {
    match s {
        "d1" => Ok(LanePreset::D1),
        "d2" => Ok(LanePreset::D2),
        other => Err(ExperimentError::Input(format!("unknown preset '{other}' (d1 or d2)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrainVariant {
    D1Static,
    D2Sl,
    D2Bco,
    Baseline,
}

impl TrainVariant {
    pub fn policy_kind(self) -> &'static str {
        match self {
            TrainVariant::D1Static => "static-d1",
            TrainVariant::D2Sl | TrainVariant::D2Bco => "mlp-d2",
            TrainVariant::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainArgs {
    pub variant: TrainVariant,
    pub demos: PathBuf,
    /// Separate validation laps; otherwise the last `val_laps` are held out.
    pub val: Option<PathBuf>,
    pub val_laps: usize,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub seed: u64,
    /// Checkpoint to start from (d2-bco: usually the d2-sl result).
    pub init: Option<PathBuf>,
    pub squash: bool,
    pub track: Option<PathBuf>,
    #[serde(skip)]
    pub solver_log: Option<SolverLog>,
}

fn split_demos(args: &TrainArgs, demos: Vec<DemoTrajectory>) -> Result<(Vec<DemoTrajectory>, Vec<DemoTrajectory>)> {
    if let Some(v) = &args.val {
        return Ok((demos, load_demos(v)?));
    }
    if demos.len() <= args.val_laps {
        return Err(ExperimentError::Input(format!("{} laps cannot hold out {} for validation", demos.len(), args.val_laps)));
    }
    let mut train = demos;
    let val = train.split_off(train.len() - args.val_laps);
    Ok((train, val))
}

fn history_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,train_J,train_J_full,val_J,val_rms,grad_norm,active_set_flips,skipped\n");
    for r in &report.history {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{},{}\n",
            r.epoch, r.train_j, r.train_j_full, r.val_j, r.val_rms, r.grad_norm, r.active_set_flips, r.skipped
        ));
    }
    out
}

fn sl_net(args: &TrainArgs, track: &TrackSpec, train: &[DemoTrajectory], m: &mut RunManifest) -> Result<(DbarNet, Value)> {
    let mut net = DbarNet::random(track.lane_width(), args.squash, args.seed);
    let cfg = SlConfig { seed: args.seed, lr: args.lr.unwrap_or(SlConfig::default().lr), ..SlConfig::default() };
    let cfg = match args.epochs {
        Some(e) if args.variant == TrainVariant::D2Sl => SlConfig { max_epochs: e, ..cfg },
        _ => cfg,
    };
    let report = pretrain_sl_dbar(&mut net, track, train, &cfg)?;
    let path = args.out.join("sl_log.csv");
    let mut csv = String::from("epoch,mse\n");
    for (i, v) in report.mse.iter().enumerate() {
        csv.push_str(&format!("{i},{v:?}\n"));
    }
    std::fs::write(&path, csv)?;
    m.output(&path);
    Ok((net, json!({ "samples": report.samples, "best_epoch": report.best_epoch, "mse_initial": report.mse[0], "mse_best": report.mse[report.best_epoch] })))
}

fn load_kind(path: &Path, track: Arc<TrackSpec>, want: &str) -> Result<Box<dyn Policy>> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind() != Some(want) {
        return Err(ExperimentError::Input(format!("{} holds a {:?} policy, expected {want}", path.display(), ckpt.kind())));
    }
    Ok(policy_from_checkpoint(&ckpt, track)?)
}

/// Trains one policy variant and writes `final.ckpt`, `history.csv`, the
/// trainer's per-batch log and per-epoch checkpoints.
pub fn train(args: &TrainArgs) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let kind = args.variant.policy_kind();
    let track = resolve_track(preset_for_kind(kind), args.track.as_deref(), &args.demos)?;
    let demos = load_demos(&args.demos)?;
    check_lane(&track, &demos)?;
    let (train, val) = split_demos(args, demos)?;
    std::fs::create_dir_all(&args.out)?;
    let mut m = RunManifest::new(&format!("train {}", kind_label(args.variant)), serde_json::to_value(args)?, Some(args.seed));
    let mut cfg = TrainConfig::for_kind(kind);
    cfg.seed = args.seed;
    cfg.out_dir = Some(args.out.clone());
    cfg.solver_log = args.solver_log.clone();
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    let mut summary = serde_json::Map::new();
    let spec = |v| OcpSpec::new(track.clone(), v);

    let (policy, report): (Box<dyn Policy>, Option<TrainReport>) = match args.variant {
        TrainVariant::D1Static => {
            let mut p = match &args.init {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    let raw: [f64; 4] = ckpt.array("raw")?.try_into().map_err(|_| ExperimentError::Input("bad static checkpoint".into()))?;
                    HierarchicalPolicy::static_d1(spec(CostVariant::D1Stage), StaticRawParams { raw })
                }
                None => HierarchicalPolicy::static_d1(spec(CostVariant::D1Stage), StaticRawParams::initial(track.lane_width())),
            };
            let r = train_mpc_bco(&mut p, &train, &val, &cfg)?;
            let theta = p.theta(&[0.0; crate::track::PREVIEW_LEN]).to_vec();
            summary.insert("theta".into(), json!({ "w_d": theta[0], "w_theta": theta[1], "w_rate": theta[2], "d_bar": theta[3] }));
            (Box::new(p), Some(r))
        }
        TrainVariant::D2Sl => {
            let (net, sl) = sl_net(args, &track, &train, &mut m)?;
            summary.insert("sl".into(), sl);
            (Box::new(HierarchicalPolicy::mlp_d2(spec(CostVariant::D2Terminal), net)), None)
        }
        TrainVariant::D2Bco => {
            let net = match &args.init {
                Some(path) => {
                    let p = load_kind(path, track.clone(), "mlp-d2")?;
                    let ckpt = p.checkpoint();
                    let squash = ckpt.meta.get("squash").map(|v| v != "false").unwrap_or(true);
                    let mut net = DbarNet::zeros(track.lane_width(), squash);
                    net.mlp.params_mut().copy_from_slice(&p.params());
                    net
                }
                None => {
                    let (net, sl) = sl_net(args, &track, &train, &mut m)?;
                    summary.insert("sl".into(), sl);
                    net
                }
            };
            let mut p = HierarchicalPolicy::mlp_d2(spec(CostVariant::D2Terminal), net);
            let r = train_mpc_bco(&mut p, &train, &val, &cfg)?;
            (Box::new(p), Some(r))
        }
        TrainVariant::Baseline => {
            let rate = spec(CostVariant::D2Terminal).bounds.delta_rate;
            let mut p = match &args.init {
                Some(path) => {
                    let loaded = load_kind(path, track.clone(), "baseline")?;
                    let mut b = BaselinePolicy::zeros(&track, rate);
                    b.set_params(&loaded.params());
                    b
                }
                None => BaselinePolicy::random(&track, rate, args.seed),
            };
            let r = train_baseline_bco(&mut p, &track, &train, &val, &cfg)?;
            (Box::new(p), Some(r))
        }
    };
    if let Some(r) = &report {
        let path = args.out.join("history.csv");
        std::fs::write(&path, history_csv(r))?;
        m.output(&path);
        m.output(args.out.join("train_log.csv"));
        summary.insert("best_epoch".into(), json!(r.best_epoch));
        summary.insert("val_J_initial".into(), json!(r.initial_val()));
        summary.insert("val_J_best".into(), json!(r.best_val()));
        summary.insert("loss".into(), json!(TrainConfig::LOSS_TAG));
    }
    let path = args.out.join("final.ckpt");
    policy.checkpoint().save(&path)?;
    m.output(&path);
    summary.insert("train_laps".into(), json!(train.len()));
    summary.insert("val_laps".into(), json!(val.len()));
    m.summary = Value::Object(summary);
    m.write(&args.out, started)?;
    Ok(m)
}

fn kind_label(v: TrainVariant) -> &'static str {
    match v {
        TrainVariant::D1Static => "d1-static",
        TrainVariant::D2Sl => "d2-sl",
        TrainVariant::D2Bco => "d2-bco",
        TrainVariant::Baseline => "baseline",
    }
}

/// Loads a checkpoint on the track chosen by [`resolve_track`] for its kind.
pub fn load_policy(path: &Path, track: Option<&Path>, demos: &Path) -> Result<(Box<dyn Policy>, Arc<TrackSpec>)> {
    let ckpt = Checkpoint::load(path)?;
    let kind = ckpt.kind().ok_or_else(|| ExperimentError::Input(format!("{} has no policy kind", path.display())))?;
    let track = resolve_track(preset_for_kind(kind), track, demos)?;
    Ok((policy_from_checkpoint(&ckpt, track.clone())?, track))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalArgs {
    pub policy: PathBuf,
    pub demos: PathBuf,
    pub n_subtraj: usize,
    pub seed: u64,
    pub track: Option<PathBuf>,
    pub out: PathBuf,
    #[serde(skip)]
    pub solver_log: Option<SolverLog>,
}

/// Writes `eval.csv` (per sub-trajectory) and `eval.json`.
pub fn eval(args: &EvalArgs) -> Result<(RunManifest, EvalReport)> {
    let started = std::time::Instant::now();
    let (mut policy, track) = load_policy(&args.policy, args.track.as_deref(), &args.demos)?;
    let demos = load_demos(&args.demos)?;
    check_lane(&track, &demos)?;
    let cfg = EvalConfig { n_subtraj: args.n_subtraj, seed: args.seed, solver_log: args.solver_log.clone(), ..EvalConfig::default() };
    let report = evaluate(policy.as_mut(), &demos, &track, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let mut m = RunManifest::new("eval", serde_json::to_value(args)?, Some(args.seed));
    let csv = args.out.join("eval.csv");
    std::fs::write(&csv, report.to_csv())?;
    let js = args.out.join("eval.json");
    std::fs::write(&js, serde_json::to_string_pretty(&report)?)?;
    m.output(&csv);
    m.output(&js);
    m.summary = json!({
        "policy": policy.kind(),
        "imitation_sum_sq": report.imitation_sum_sq,
        "imitation_rms": report.imitation_rms,
        "safety_violations": report.safety_violations,
        "comfort": report.comfort,
        "reference_comfort": report.reference_comfort,
        "tlc_min": if report.tlc_min.is_finite() { json!(report.tlc_min) } else { json!(">=10") },
        "failures": report.failures,
    });
    m.write(&args.out, started)?;
    Ok((m, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportArgs {
    pub demos: PathBuf,
    pub lap: usize,
    pub after: PathBuf,
    /// Defaults to the untrained policy of the same kind.
    pub before: Option<PathBuf>,
    /// Training output directory whose `history.csv` becomes the loss curve.
    pub train_dir: Option<PathBuf>,
    pub track: Option<PathBuf>,
    pub out: PathBuf,
    #[serde(skip)]
    pub solver_log: Option<SolverLog>,
}

fn untrained(kind: &str, track: Arc<TrackSpec>) -> Result<Box<dyn Policy>> {
    Ok(match kind {
        "static-d1" => Box::new(HierarchicalPolicy::static_d1(OcpSpec::new(track.clone(), CostVariant::D1Stage), StaticRawParams::initial(track.lane_width()))),
        "mlp-d2" => Box::new(HierarchicalPolicy::mlp_d2(OcpSpec::new(track.clone(), CostVariant::D2Terminal), DbarNet::random(track.lane_width(), true, 0))),
        "baseline" => Box::new(BaselinePolicy::random(&track, OcpSpec::new(track.clone(), CostVariant::D2Terminal).bounds.delta_rate, 0)),
        other => return Err(ExperimentError::Input(format!("unknown policy kind '{other}'"))),
    })
}

/// Writes `lap_trace.csv` (`series,t,sigma,d` for demo, before and after
/// on one full lap) and, given a training directory, `loss_curve.csv`.
pub fn export_plots(args: &ExportArgs) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let (mut after, track) = load_policy(&args.after, args.track.as_deref(), &args.demos)?;
    let mut before = match &args.before {
        Some(p) => load_policy(p, args.track.as_deref(), &args.demos)?.0,
        None => untrained(after.kind(), track.clone())?,
    };
    let demos = load_demos(&args.demos)?;
    check_lane(&track, &demos)?;
    let demo = demos
        .get(args.lap)
        .ok_or_else(|| ExperimentError::Input(format!("lap {} not in {} laps", args.lap, demos.len())))?
        .resample(crate::vehicle::DEFAULT_DT);
    let cfg = RolloutConfig { duration: demo.steps() as f64 * demo.dt, ..RolloutConfig::new(1.0) }.with_solver_log(args.solver_log.clone());
    let mut csv = String::from("series,t,sigma,d\n");
    let mut push = |name: &str, states: &[crate::vehicle::VehicleState]| {
        for (k, s) in states.iter().enumerate() {
            csv.push_str(&format!("{name},{:?},{:?},{:?}\n", k as f64 * demo.dt, s.sigma, s.d));
        }
    };
    push("demo", &demo.states);
    let mut summary = serde_json::Map::new();
    for (name, p) in [("before", &mut before), ("after", &mut after)] {
        let tape = rollout(p.as_mut(), &track, &demo.states[0], &cfg)?;
        let sq: f64 = tape.states.iter().zip(&demo.states).map(|(a, b)| (a.d - b.d).powi(2)).sum();
        summary.insert(format!("{name}_lap_sum_sq"), json!(sq));
        push(name, &tape.states);
    }
    std::fs::create_dir_all(&args.out)?;
    let mut m = RunManifest::new("export-plots", serde_json::to_value(args)?, None);
    let path = args.out.join("lap_trace.csv");
    std::fs::write(&path, csv)?;
    m.output(&path);
    if let Some(dir) = &args.train_dir {
        let text = std::fs::read_to_string(dir.join("history.csv"))?;
        let mut curve = String::from("epoch,train_J,val_J\n");
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 4 {
                return Err(ExperimentError::Input(format!("malformed history row '{line}'")));
            }
            curve.push_str(&format!("{},{},{}\n", f[0], f[1], f[3]));
        }
        let path = args.out.join("loss_curve.csv");
        std::fs::write(&path, curve)?;
        m.output(&path);
    }
    m.summary = Value::Object(summary);
    m.write(&args.out, started)?;
    Ok(m)
}

/// Runs the numerical integrity suite and writes `grad_check.csv`.
pub fn grad_check(full: bool, seed: u64, out: &Path) -> Result<(RunManifest, Vec<CheckOutcome>)> {
    let started = std::time::Instant::now();
    let results = run_suite(if full { SuiteSize::FULL } else { SuiteSize::QUICK }, seed);
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("check,passed,checked,skipped,worst,tolerance,detail\n");
    for r in &results {
        csv.push_str(&format!("{},{},{},{},{:?},{:?},\"{}\"\n", r.name, r.passed, r.checked, r.skipped, r.worst, r.tolerance, r.detail));
    }
    let path = out.join("grad_check.csv");
    std::fs::write(&path, csv)?;
    let mut m = RunManifest::new("grad-check", json!({ "full": full }), Some(seed));
    m.output(&path);
    m.summary = json!({ "passed": results.iter().filter(|r| r.passed).count(), "total": results.len() });
    m.write(out, started)?;
    Ok((m, results))
}
