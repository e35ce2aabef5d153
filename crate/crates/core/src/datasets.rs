//! Synthetic expert demonstrations and their on-disk format.
//!
//! The expert is an MPC with known cost parameters, so learned parameters
//! can be compared against ground truth. A demonstration directory holds
//! one CSV file per lap:
//!
//! ```text
//! # mpcbco-demo 1
//! # dt=0.1
//! # track=default
//! # lap=0
//! # variant=d1
//! # seed=7
//! # lane_width=4.5
//! t,v_y,psi_dot,sigma,d,theta_e,delta
//! 0.0,0.0,0.0,0.0,-0.4,0.0,0.0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::ocp::{CostVariant, Mpc, OcpError, OcpSpec, Theta};
use crate::track::{Preview, TrackSpec};
use crate::vehicle::{step_rk4, VehicleError, VehicleState, DEFAULT_DT};

pub const DEMO_MAGIC: &str = "mpcbco-demo";
pub const DEMO_VERSION: u32 = 1;
pub const DEMO_HEADER: &str = "t,v_y,psi_dot,sigma,d,theta_e,delta";
/// Curvature scale of the smooth sign used by the D2 expert.
pub const KAPPA_SIGN_SCALE: f64 = 1e-3;
/// Correlation time of the reference noise.
pub const NOISE_TAU: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("expert failed at t = {time:.1} s: {source}")]
    Expert {
        time: f64,
        #[source]
        source: OcpError,
    },
    #[error("expert plant step: {0}")]
    Plant(#[from] VehicleError),
    #[error("invalid expert: {0}")]
    InvalidExpert(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: unsupported demo version {version}")]
    Version { path: String, version: u32 },
    #[error("no demonstration files in {0}")]
    Empty(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpertVariant {
    /// Stage cost with unit weights and a fixed lateral offset.
    D1ConstOffset { d_bar_star: f64 },
    /// Terminal cost with an offset toward the inside of each curve.
    D2CurvatureDependent { r_off: f64 },
}

impl ExpertVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            ExpertVariant::D1ConstOffset { .. } => "d1",
            ExpertVariant::D2CurvatureDependent { .. } => "d2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertSpec {
    pub variant: ExpertVariant,
    /// Stationary std of the Ornstein-Uhlenbeck reference jitter (m).
    pub noise_std: f64,
    pub seed: u64,
}

impl ExpertSpec {
    /// `d̄* = -0.4 m`, noise 0.05 m.
    pub fn d1(seed: u64) -> Self {
        Self { variant: ExpertVariant::D1ConstOffset { d_bar_star: -0.4 }, noise_std: 0.05, seed }
    }

    /// `r_off = 1.5 m`, noise 0.05 m.
    pub fn d2(seed: u64) -> Self {
        Self { variant: ExpertVariant::D2CurvatureDependent { r_off: 1.5 }, noise_std: 0.05, seed }
    }

    pub fn noise_free(mut self) -> Self {
        self.noise_std = 0.0;
        self
    }

    pub fn cost_variant(&self) -> CostVariant {
        match self.variant {
            ExpertVariant::D1ConstOffset { .. } => CostVariant::D1Stage,
            ExpertVariant::D2CurvatureDependent { .. } => CostVariant::D2Terminal,
        }
    }

    fn validate(&self, half_width: f64) -> Result<(), DatasetError> {
        let mag = match self.variant {
            ExpertVariant::D1ConstOffset { d_bar_star } => d_bar_star.abs(),
            ExpertVariant::D2CurvatureDependent { r_off } => r_off,
        };
        if !(mag < half_width) || !(self.noise_std >= 0.0) {
            return Err(DatasetError::InvalidExpert(format!("offset {mag} must be below w/2 = {half_width}, noise >= 0")));
        }
        Ok(())
    }

    /// Noise-free reference offset for a curvature preview. D2 looks at
    /// the curvature 10 m ahead and leans toward the curve center.
    pub fn reference(&self, chi: &Preview) -> f64 {
        match self.variant {
            ExpertVariant::D1ConstOffset { d_bar_star } => d_bar_star,
            ExpertVariant::D2CurvatureDependent { r_off } => r_off * (chi[2] / KAPPA_SIGN_SCALE).tanh(),
        }
    }

    fn theta(&self, d_bar: f64) -> Theta {
        match self.variant {
            ExpertVariant::D1ConstOffset { .. } => Theta::Stage { w_d: 1.0, w_theta: 1.0, w_rate: 1.0, d_bar },
            ExpertVariant::D2CurvatureDependent { .. } => Theta::Terminal { d_bar },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoMeta {
    pub track: String,
    pub lap: usize,
    pub variant: String,
    pub seed: u64,
    pub lane_width: f64,
}

/// Uniformly sampled state sequence `s*_0..s*_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoTrajectory {
    pub dt: f64,
    pub states: Vec<VehicleState>,
    pub meta: DemoMeta,
}

impl DemoTrajectory {
    pub fn duration(&self) -> f64 {
        self.states.len().saturating_sub(1) as f64 * self.dt
    }

    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Consecutive non-overlapping windows of `steps` transitions
    /// (`steps + 1` states; neighbours share their boundary state).
    pub fn windows(&self, steps: usize) -> Vec<DemoTrajectory> {
        assert!(steps >= 1);
        (0..)
            .map(|k| k * steps)
            .take_while(|start| start + steps < self.states.len())
            .map(|start| DemoTrajectory { dt: self.dt, states: self.states[start..=start + steps].to_vec(), meta: self.meta.clone() })
            .collect()
    }

    /// Linear interpolation onto a grid with spacing `dt`, starting at the
    /// first sample and ending at or before the last.
    pub fn resample(&self, dt: f64) -> DemoTrajectory {
        if (dt - self.dt).abs() <= 1e-12 * dt || self.states.len() < 2 {
            return DemoTrajectory { dt, ..self.clone() };
        }
        let n = (self.duration() / dt + 1e-9).floor() as usize;
        let states = (0..=n)
            .map(|k| {
                let pos = k as f64 * dt / self.dt;
                let i = (pos.floor() as usize).min(self.states.len() - 2);
                let f = pos - i as f64;
                let (a, b) = (self.states[i].to_array(), self.states[i + 1].to_array());
                VehicleState::from_array(&std::array::from_fn(|j| a[j] + f * (b[j] - a[j])))
            })
            .collect();
        DemoTrajectory { dt, states, meta: self.meta.clone() }
    }
}

/// Mean-reverting noise sampled exactly at a fixed step.
struct OuNoise {
    decay: f64,
    std: f64,
    value: f64,
}

impl OuNoise {
    fn new(std: f64, dt: f64, rng: &mut ChaCha8Rng) -> Self {
        let z: f64 = StandardNormal.sample(rng);
        Self { decay: (-dt / NOISE_TAU).exp(), std, value: std * z }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.value = self.decay * self.value + self.std * (1.0 - self.decay * self.decay).sqrt() * z;
        self.value
    }
}

/// Drives the expert MPC around the track for `laps` laps and splits the
/// run into one trajectory per lap. Any solver failure aborts generation.
pub fn generate_demos(track: Arc<TrackSpec>, expert: &ExpertSpec, laps: usize) -> Result<Vec<DemoTrajectory>, DatasetError> {
    let half = track.half_width();
    expert.validate(half)?;
    let spec = OcpSpec::new(track.clone(), expert.cost_variant());
    let dt = DEFAULT_DT;
    let lap_len = track.total_length();
    let mut rng = ChaCha8Rng::seed_from_u64(expert.seed);
    let mut noise = OuNoise::new(expert.noise_std, dt, &mut rng);
    let mut mpc = Mpc::new(spec.clone());

    let d0 = expert.reference(&track.curvature_preview(0.0)).clamp(-half, half);
    let mut s = VehicleState::new(0.0, 0.0, 0.0, d0, 0.0, 0.0);
    let mut demos = Vec::with_capacity(laps);
    let mut current = vec![s];
    let mut step = 0usize;
    while demos.len() < laps {
        let chi = track.curvature_preview(s.sigma);
        let d_bar = (expert.reference(&chi) + noise.next(&mut rng)).clamp(-half, half);
        let (_, sol) = mpc
            .solve(&s, expert.theta(d_bar).weights())
            .map_err(|source| DatasetError::Expert { time: step as f64 * dt, source })?;
        s = step_rk4(&s, sol.u0(), &spec.vehicle, track.as_ref(), dt)?;
        step += 1;
        current.push(s);
        if s.sigma >= (demos.len() + 1) as f64 * lap_len {
            let meta = DemoMeta {
                track: track.name().to_string(),
                lap: demos.len(),
                variant: expert.variant.tag().to_string(),
                seed: expert.seed,
                lane_width: track.lane_width(),
            };
            demos.push(DemoTrajectory { dt, states: std::mem::replace(&mut current, vec![s]), meta });
        }
    }
    Ok(demos)
}

pub fn demo_to_csv(demo: &DemoTrajectory) -> String {
    let m = &demo.meta;
    let mut out = format!("# {DEMO_MAGIC} {DEMO_VERSION}\n");
    let _ = writeln!(out, "# dt={:?}", demo.dt);
    let _ = writeln!(out, "# track={}", m.track);
    let _ = writeln!(out, "# lap={}", m.lap);
    let _ = writeln!(out, "# variant={}", m.variant);
    let _ = writeln!(out, "# seed={}", m.seed);
    let _ = writeln!(out, "# lane_width={:?}", m.lane_width);
    out.push_str(DEMO_HEADER);
    out.push('\n');
    for (i, s) in demo.states.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            i as f64 * demo.dt,
            s.v_y,
            s.psi_dot,
            s.sigma,
            s.d,
            s.theta_e,
            s.delta
        );
    }
    out
}

pub fn demo_from_csv(text: &str, path: &str) -> Result<DemoTrajectory, DatasetError> {
    let bad = |line: usize, msg: String| DatasetError::Parse { path: path.to_string(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let version = first
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|r| r.strip_prefix(DEMO_MAGIC))
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad(1, format!("expected '# {DEMO_MAGIC} <version>'")))?;
    if version != DEMO_VERSION {
        return Err(DatasetError::Version { path: path.to_string(), version });
    }
    let mut kv = BTreeMap::new();
    let mut header_seen = false;
    let mut states = Vec::new();
    let mut times = Vec::new();
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if !header_seen {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad(no, format!("expected '# key=value', got '{line}'")))?;
                kv.insert(k.trim().to_string(), (no, v.trim().to_string()));
                continue;
            }
            if line != DEMO_HEADER {
                return Err(bad(no, format!("expected header '{DEMO_HEADER}'")));
            }
            header_seen = true;
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(no, format!("bad number: {e}")))?;
        if vals.len() != 7 {
            return Err(bad(no, format!("expected 7 fields, found {}", vals.len())));
        }
        times.push((no, vals[0]));
        states.push(VehicleState::new(vals[1], vals[2], vals[3], vals[4], vals[5], vals[6]));
    }
    if !header_seen {
        return Err(bad(text.lines().count().max(1), "missing column header".into()));
    }
    let get = |k: &str| kv.get(k).map(|(_, v)| v.as_str());
    let num = |k: &str| -> Result<f64, DatasetError> {
        let (no, v) = kv.get(k).ok_or_else(|| bad(1, format!("missing '{k}' in preamble")))?;
        v.parse().map_err(|_| bad(*no, format!("bad value for {k}: {v}")))
    };
    let dt = num("dt")?;
    if !(dt > 0.0) {
        return Err(bad(kv["dt"].0, "dt must be positive".into()));
    }
    for (k, &(no, t)) in times.iter().enumerate() {
        if (t - k as f64 * dt).abs() > 1e-6 * dt.max(t.abs()) {
            return Err(bad(no, format!("time {t} breaks the uniform grid of {dt} s")));
        }
    }
    let meta = DemoMeta {
        track: get("track").unwrap_or("").to_string(),
        lap: num("lap").map(|v| v as usize).unwrap_or(0),
        variant: get("variant").unwrap_or("").to_string(),
        seed: num("seed").map(|v| v as u64).unwrap_or(0),
        lane_width: num("lane_width")?,
    };
    Ok(DemoTrajectory { dt, states, meta })
}

/// Writes one `lap_NN.csv` per trajectory into `dir` (created if needed).
pub fn save_demos(dir: impl AsRef<Path>, demos: &[DemoTrajectory]) -> Result<Vec<PathBuf>, DatasetError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        let p = dir.join(format!("lap_{i:02}.csv"));
        std::fs::write(&p, demo_to_csv(d))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Loads every `*.csv` in `dir`, in file-name order.
pub fn load_demos(dir: impl AsRef<Path>) -> Result<Vec<DemoTrajectory>, DatasetError> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DatasetError::Empty(dir.display().to_string()));
    }
    files
        .iter()
        .map(|p| demo_from_csv(&std::fs::read_to_string(p)?, &p.display().to_string()))
        .collect()
}

#[cfg(test)]
mod tests;
