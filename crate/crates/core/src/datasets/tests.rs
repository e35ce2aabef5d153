use proptest::prelude::*;

use super::*;
use crate::track::Segment;

fn curve_then_straight() -> Arc<TrackSpec> {
    Arc::new(TrackSpec::new("hook", vec![Segment::new(100.0, 1.0 / 100.0), Segment::new(400.0, 0.0)], 4.5).unwrap())
}

fn long_arcs() -> Arc<TrackSpec> {
    let segs = vec![
        Segment::new(100.0, 0.0),
        Segment::new(300.0, 1.0 / 150.0),
        Segment::new(100.0, 0.0),
        Segment::new(300.0, -1.0 / 150.0),
    ];
    Arc::new(TrackSpec::new("arcs", segs, 8.0).unwrap())
}

#[test]
fn d1_expert_settles_on_its_offset() {
    let track = curve_then_straight();
    let demos = generate_demos(track, &ExpertSpec::d1(1).noise_free(), 2).unwrap();
    assert_eq!(demos.len(), 2);
    for demo in &demos {
        let lap0 = demo.meta.lap as f64 * 500.0;
        // late on the straight, before the next curve enters the horizon
        let late: Vec<f64> =
            demo.states.iter().filter(|s| s.sigma > lap0 + 380.0 && s.sigma < lap0 + 450.0).map(|s| s.d).collect();
        assert!(!late.is_empty());
        for d in late {
            assert!((d + 0.4).abs() < 1e-3, "lap {}: d = {d}", demo.meta.lap);
        }
    }
}

#[test]
fn laps_are_contiguous_and_in_lane() {
    let track = Arc::new(crate::track::default_track(crate::track::LanePreset::D2));
    let demos = generate_demos(track.clone(), &ExpertSpec::d2(3), 2).unwrap();
    assert_eq!(demos[0].states.last(), demos[1].states.first());
    for demo in &demos {
        assert_eq!(demo.dt, 0.1);
        assert_eq!(demo.meta.variant, "d2");
        for w in demo.states.windows(2) {
            assert!(w[1].sigma > w[0].sigma);
        }
        for s in &demo.states {
            assert!(s.d.abs() <= track.half_width() + 1e-6);
        }
    }
    assert!(demos[1].states.first().unwrap().sigma >= track.total_length());
}

#[test]
fn generation_is_deterministic() {
    let track = curve_then_straight();
    let a = generate_demos(track.clone(), &ExpertSpec::d1(42), 1).unwrap();
    let b = generate_demos(track.clone(), &ExpertSpec::d1(42), 1).unwrap();
    let c = generate_demos(track, &ExpertSpec::d1(43), 1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn d2_expert_leans_into_curves() {
    let track = long_arcs();
    let demos = generate_demos(track, &ExpertSpec::d2(0).noise_free(), 1).unwrap();
    let mean = |lo: f64, hi: f64| {
        let v: Vec<f64> = demos[0].states.iter().filter(|s| s.sigma > lo && s.sigma < hi).map(|s| s.d).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let left = mean(150.0, 370.0);
    let right = mean(550.0, 770.0);
    assert!(left > 0.0 && right < 0.0, "{left} {right}");
    for m in [left, -right] {
        assert!((m - 1.5).abs() <= 0.3, "mean offset {m}");
    }
}

#[test]
fn invalid_expert_rejected() {
    let bad = ExpertSpec { variant: ExpertVariant::D1ConstOffset { d_bar_star: 3.0 }, noise_std: 0.0, seed: 0 };
    assert!(matches!(generate_demos(curve_then_straight(), &bad, 1), Err(DatasetError::InvalidExpert(_))));
}

fn sample_demo() -> DemoTrajectory {
    let states = (0..30)
        .map(|i| {
            let t = i as f64 * 0.05;
            VehicleState::new(0.01 * t.sin(), -0.002 * t, 13.0 * t + 1.0 / 3.0, 0.2 * t.cos(), 1e-7 * t, -0.001)
        })
        .collect();
    let meta = DemoMeta { track: "default".into(), lap: 3, variant: "d1".into(), seed: 11, lane_width: 4.5 };
    DemoTrajectory { dt: 0.05, states, meta }
}

#[test]
fn files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let demo = sample_demo();
    let paths = save_demos(dir.path(), &[demo.clone(), demo.clone()]).unwrap();
    assert_eq!(paths.len(), 2);
    let back = load_demos(dir.path()).unwrap();
    assert_eq!(back, vec![demo.clone(), demo]);
}

#[test]
fn malformed_files_name_the_line() {
    let text = demo_to_csv(&sample_demo());
    let cut = &text[..text.len() - 12];
    let err = demo_from_csv(cut, "lap.csv").unwrap_err();
    let lines = cut.lines().count();
    match err {
        DatasetError::Parse { line, .. } => assert_eq!(line, lines),
        other => panic!("unexpected {other}"),
    }
    let v2 = text.replacen("mpcbco-demo 1", "mpcbco-demo 2", 1);
    assert!(matches!(demo_from_csv(&v2, "x"), Err(DatasetError::Version { version: 2, .. })));
    let no_dt = text.replacen("# dt=0.05\n", "", 1);
    assert!(demo_from_csv(&no_dt, "x").is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_demos(dir.path()), Err(DatasetError::Empty(_))));
}

#[test]
fn resampling_hits_original_samples() {
    let demo = sample_demo();
    let coarse = demo.resample(0.1);
    assert_eq!(coarse.dt, 0.1);
    assert_eq!(coarse.states.len(), 15);
    for (k, s) in coarse.states.iter().enumerate() {
        let orig = demo.states[2 * k].to_array();
        for (a, b) in s.to_array().iter().zip(orig) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
    let fine = coarse.resample(0.05);
    assert_eq!(fine.states.len(), 29);
    let mid = fine.states[1].to_array();
    let (a, b) = (coarse.states[0].to_array(), coarse.states[1].to_array());
    for j in 0..6 {
        assert!((mid[j] - 0.5 * (a[j] + b[j])).abs() < 1e-12);
    }
}

#[test]
fn windows_share_boundaries() {
    let demo = sample_demo();
    let w = demo.windows(10);
    assert_eq!(w.len(), 2);
    assert_eq!(w[0].states.len(), 11);
    assert_eq!(w[0].states[10], w[1].states[0]);
    assert_eq!(w[1].states[10], demo.states[20]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn d2_reference_is_odd_and_bounded(k in -0.05f64..0.05) {
        let e = ExpertSpec::d2(0);
        let mut chi = [0.0; 7];
        chi[2] = k;
        let r = e.reference(&chi);
        chi[2] = -k;
        prop_assert_eq!(r, -e.reference(&chi));
        prop_assert!(r.abs() <= 1.5);
        prop_assert!(r * k >= 0.0);
    }
}
