//! Piecewise-constant-curvature tracks and curvature previews.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

/// Number of curvature samples in a preview.
pub const PREVIEW_LEN: usize = 7;
/// Spacing between preview samples, in meters.
pub const PREVIEW_SPACING: f64 = 5.0;

/// Curvature preview `[κ(σ), κ(σ+5), …, κ(σ+30)]`.
pub type Preview = [f64; PREVIEW_LEN];

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("track has no segments")]
    Empty,
    #[error("segment {index} has non-positive length {length}")]
    BadLength { index: usize, length: f64 },
    #[error("lane width must be positive, got {0}")]
    BadLaneWidth(f64),
    #[error("segment {index}: |curvature| * w/2 = {value} reaches the Frenet singularity")]
    Singular { index: usize, value: f64 },
    #[error("track file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Constant-curvature piece of road.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub length: f64,
    pub curvature: f64,
}

impl Segment {
    pub fn new(length: f64, curvature: f64) -> Self {
        Self { length, curvature }
    }
}

/// Lane-width presets for the two demonstration settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LanePreset {
    /// Narrow lane, 4.5 m.
    D1,
    /// Wide lane, 8 m.
    D2,
}

impl LanePreset {
    pub fn lane_width(self) -> f64 {
        match self {
            LanePreset::D1 => 4.5,
            LanePreset::D2 => 8.0,
        }
    }
}

impl std::str::FromStr for LanePreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "d1" => Ok(LanePreset::D1),
            "d2" => Ok(LanePreset::D2),
            other => Err(format!("unknown lane preset '{other}' (expected d1 or d2)")),
        }
    }
}

/// Closed track made of constant-curvature segments. Arc length wraps
/// modulo the total length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSpec {
    name: String,
    segments: Vec<Segment>,
    starts: Vec<f64>,
    lane_width: f64,
    total_length: f64,
}

impl TrackSpec {
    pub fn new(
        name: impl Into<String>,
        segments: Vec<Segment>,
        lane_width: f64,
    ) -> Result<Self, TrackError> {
        if segments.is_empty() {
            return Err(TrackError::Empty);
        }
        if !(lane_width > 0.0) || !lane_width.is_finite() {
            return Err(TrackError::BadLaneWidth(lane_width));
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for (index, seg) in segments.iter().enumerate() {
            if !(seg.length > 0.0) || !seg.length.is_finite() {
                return Err(TrackError::BadLength { index, length: seg.length });
            }
            let value = seg.curvature.abs() * lane_width / 2.0;
            if !(value < 1.0) {
                return Err(TrackError::Singular { index, value });
            }
            starts.push(acc);
            acc += seg.length;
        }
        Ok(Self { name: name.into(), segments, starts, lane_width, total_length: acc })
    }

    /// Single zero-curvature segment.
    pub fn straight(length: f64, lane_width: f64) -> Result<Self, TrackError> {
        Self::new("straight", vec![Segment::new(length, 0.0)], lane_width)
    }

    /// Single constant-curvature loop.
    pub fn constant(length: f64, curvature: f64, lane_width: f64) -> Result<Self, TrackError> {
        Self::new("constant", vec![Segment::new(length, curvature)], lane_width)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn lane_width(&self) -> f64 {
        self.lane_width
    }

    pub fn half_width(&self) -> f64 {
        self.lane_width / 2.0
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn with_lane_width(&self, lane_width: f64) -> Result<Self, TrackError> {
        Self::new(self.name.clone(), self.segments.clone(), lane_width)
    }

    /// Same track with every curvature negated.
    pub fn mirrored(&self) -> Self {
        let segments = self.segments.iter().map(|s| Segment::new(s.length, -s.curvature)).collect();
        Self::new(format!("{}-mirrored", self.name), segments, self.lane_width)
            .expect("mirroring preserves validity")
    }

    pub fn max_abs_curvature(&self) -> f64 {
        self.segments.iter().fold(0.0, |m, s| f64::max(m, s.curvature.abs()))
    }

    /// Index of the segment containing `arc` (wrapped). Boundaries belong to
    /// the downstream segment.
    pub fn segment_index(&self, arc: f64) -> usize {
        let a = self.wrap(arc);
        let idx = self.starts.partition_point(|&s| s <= a);
        idx.saturating_sub(1)
    }

    pub fn wrap(&self, arc: f64) -> f64 {
        let a = arc.rem_euclid(self.total_length);
        // rem_euclid can return total_length for tiny negative inputs
        if a >= self.total_length {
            0.0
        } else {
            a
        }
    }

    pub fn curvature_at(&self, arc: f64) -> f64 {
        self.segments[self.segment_index(arc)].curvature
    }

    pub fn curvature_preview(&self, arc: f64) -> Preview {
        std::array::from_fn(|i| self.curvature_at(arc + PREVIEW_SPACING * i as f64))
    }

    /// Writes the plain-text track table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name={}", self.name);
        let _ = writeln!(out, "lane_width={}", self.lane_width);
        out.push_str("length_m,curvature_1pm\n");
        for s in &self.segments {
            let _ = writeln!(out, "{},{}", s.length, s.curvature);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TrackError> {
        let mut name = String::from("unnamed");
        let mut lane_width = None;
        let mut segments = Vec::new();
        let mut in_table = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !in_table {
                if line == "length_m,curvature_1pm" {
                    in_table = true;
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| TrackError::Parse {
                    line: line_no,
                    msg: format!("expected key=value or table header, got '{line}'"),
                })?;
                match key.trim() {
                    "name" => name = value.trim().to_string(),
                    "lane_width" => {
                        lane_width = Some(parse_f64(value, line_no)?);
                    }
                    other => {
                        return Err(TrackError::Parse {
                            line: line_no,
                            msg: format!("unknown key '{other}'"),
                        })
                    }
                }
            } else {
                let (l, k) = line.split_once(',').ok_or_else(|| TrackError::Parse {
                    line: line_no,
                    msg: "expected two comma-separated columns".into(),
                })?;
                segments.push(Segment::new(parse_f64(l, line_no)?, parse_f64(k, line_no)?));
            }
        }
        if !in_table {
            return Err(TrackError::Parse { line: text.lines().count(), msg: "missing header".into() });
        }
        let lane_width = lane_width.ok_or(TrackError::Parse { line: 1, msg: "missing lane_width".into() })?;
        Self::new(name, segments, lane_width)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrackError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrackError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, TrackError> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| TrackError::Parse { line, msg: format!("bad number '{}': {e}", s.trim()) })
}

/// The 1200 m evaluation track: seven arcs with alternating turn direction,
/// radii between 60 m and 250 m, separated by straights.
pub const DEFAULT_TRACK_TABLE: [(f64, f64); 14] = [
    (80.0, 0.0),
    (110.0, 1.0 / 120.0),
    (60.0, 0.0),
    (90.0, -1.0 / 80.0),
    (100.0, 0.0),
    (130.0, 1.0 / 200.0),
    (50.0, 0.0),
    (70.0, -1.0 / 60.0),
    (90.0, 0.0),
    (120.0, 1.0 / 250.0),
    (40.0, 0.0),
    (80.0, -1.0 / 100.0),
    (70.0, 0.0),
    (110.0, 1.0 / 150.0),
];

pub fn default_track(preset: LanePreset) -> TrackSpec {
    let segments = DEFAULT_TRACK_TABLE.iter().map(|&(l, k)| Segment::new(l, k)).collect();
    TrackSpec::new("default", segments, preset.lane_width()).expect("default track is valid")
}

/// Anything that can answer curvature queries along the arc length.
pub trait CurvatureSource {
    fn kappa(&self, sigma: f64) -> f64;
}

impl CurvatureSource for TrackSpec {
    fn kappa(&self, sigma: f64) -> f64 {
        self.curvature_at(sigma)
    }
}

/// Curvature held fixed regardless of σ (used inside one MPC stage).
#[derive(Debug, Clone, Copy)]
pub struct ConstCurvature(pub f64);

impl CurvatureSource for ConstCurvature {
    fn kappa(&self, _sigma: f64) -> f64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_seg() -> TrackSpec {
        TrackSpec::new("t", vec![Segment::new(100.0, 0.0), Segment::new(50.0, 0.02)], 4.5).unwrap()
    }

    /// Brute-force oracle: walk the segments after wrapping.
    fn walk(track: &TrackSpec, arc: f64) -> f64 {
        let total: f64 = track.segments().iter().map(|s| s.length).sum();
        let mut a = arc % total;
        if a < 0.0 {
            a += total;
        }
        for s in track.segments() {
            if a < s.length {
                return s.curvature;
            }
            a -= s.length;
        }
        track.segments()[0].curvature
    }

    #[test]
    fn curvature_lookup_examples() {
        let straight = TrackSpec::straight(500.0, 4.5).unwrap();
        assert_eq!(straight.curvature_at(100.0), 0.0);
        let t = two_seg();
        assert_eq!(t.curvature_at(120.0), 0.02);
        assert_eq!(t.curvature_at(151.0), walk(&t, 151.0));
        assert_eq!(t.curvature_at(151.0), 0.0);
        // boundary belongs to the downstream segment
        assert_eq!(t.curvature_at(100.0), 0.02);
        assert_eq!(t.curvature_at(150.0), 0.0);
    }

    #[test]
    fn preview_examples() {
        let straight = TrackSpec::straight(300.0, 4.5).unwrap();
        assert_eq!(straight.curvature_preview(42.0), [0.0; 7]);
        let loop_ = TrackSpec::constant(600.0, 0.01, 4.5).unwrap();
        assert_eq!(loop_.curvature_preview(12.3), [0.01; 7]);
        let t = TrackSpec::new("t", vec![Segment::new(20.0, 0.0), Segment::new(200.0, 0.015)], 4.5)
            .unwrap();
        let expected: Preview = std::array::from_fn(|i| walk(&t, 5.0 * i as f64));
        assert_eq!(t.curvature_preview(0.0), expected);
        assert_eq!(t.curvature_preview(0.0), [0.0, 0.0, 0.0, 0.0, 0.015, 0.015, 0.015]);
    }

    #[test]
    fn default_track_shape() {
        for preset in [LanePreset::D1, LanePreset::D2] {
            let t = default_track(preset);
            assert!((t.total_length() - 1200.0).abs() < 1e-9);
            let curved: Vec<f64> =
                t.segments().iter().filter(|s| s.curvature != 0.0).map(|s| s.curvature).collect();
            assert_eq!(curved.len(), 7);
            assert!(curved.iter().any(|k| *k > 0.0) && curved.iter().any(|k| *k < 0.0));
            assert!(t.max_abs_curvature() * 8.0 / 2.0 < 1.0);
            for s in t.segments().iter().filter(|s| s.curvature != 0.0) {
                let r = 1.0 / s.curvature.abs();
                assert!((60.0..=250.0).contains(&r));
            }
        }
        assert_eq!(default_track(LanePreset::D2).lane_width(), 8.0);
    }

    #[test]
    fn invalid_tracks_rejected() {
        assert!(matches!(TrackSpec::new("x", vec![], 4.0), Err(TrackError::Empty)));
        assert!(matches!(
            TrackSpec::new("x", vec![Segment::new(0.0, 0.0)], 4.0),
            Err(TrackError::BadLength { .. })
        ));
        assert!(matches!(
            TrackSpec::new("x", vec![Segment::new(10.0, 0.5)], 4.0),
            Err(TrackError::Singular { .. })
        ));
        assert!(matches!(TrackSpec::straight(10.0, 0.0), Err(TrackError::BadLaneWidth(_))));
    }

    #[test]
    fn text_round_trip_and_errors() {
        let t = default_track(LanePreset::D1);
        let back = TrackSpec::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
        let err = TrackSpec::from_text("name=x\nlane_width=4\nlength_m,curvature_1pm\n10,abc\n")
            .unwrap_err();
        assert!(matches!(err, TrackError::Parse { line: 4, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn wraps_with_period(arc in -5000.0f64..5000.0, k in -3i32..4) {
            let t = default_track(LanePreset::D1);
            let shifted = arc + k as f64 * t.total_length();
            // stay away from segment boundaries where rounding picks a side
            let a = t.wrap(arc);
            let near_boundary = t.segments().iter().scan(0.0, |acc, s| { *acc += s.length; Some(*acc) })
                .any(|b| (a - b).abs() < 1e-6) || a < 1e-6;
            prop_assume!(!near_boundary);
            prop_assert_eq!(t.curvature_at(arc), t.curvature_at(shifted));
            prop_assert_eq!(t.curvature_at(arc), walk(&t, arc));
        }

        #[test]
        fn preview_matches_pointwise(arc in 0.0f64..1200.0) {
            let t = default_track(LanePreset::D2);
            let p = t.curvature_preview(arc);
            prop_assert_eq!(p[0], t.curvature_at(arc));
            for (i, v) in p.iter().enumerate() {
                prop_assert_eq!(*v, t.curvature_at(arc + 5.0 * i as f64));
            }
        }

        #[test]
        fn piecewise_constant_inside_segment(arc in 0.0f64..1200.0, frac in 0.0f64..1.0) {
            let t = default_track(LanePreset::D1);
            let idx = t.segment_index(arc);
            let start: f64 = t.segments()[..idx].iter().map(|s| s.length).sum();
            let end = start + t.segments()[idx].length;
            let gap = (arc - start).min(end - arc);
            prop_assume!(gap > 1e-6);
            let eps = frac * gap * 0.99;
            prop_assert_eq!(t.curvature_at(arc + eps), t.curvature_at(arc));
            prop_assert_eq!(t.curvature_at(arc - eps), t.curvature_at(arc));
        }
    }
}
