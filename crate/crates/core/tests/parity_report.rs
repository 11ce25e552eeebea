//! Pass/fail rules of the cross-embodiment comparison report.

use crossbody::cli::{ParityReport, ParityRow, ZeroShot};

fn row(name: &str, cross: f64, specialist: f64, reward: Option<f64>) -> ParityRow {
    ParityRow {
        embodiment: name.into(),
        cross,
        specialist,
        gap: cross - specialist,
        cross_reward: reward,
        specialist_reward: reward,
    }
}

fn report(rows: Vec<ParityRow>, nav: f64, shifted: f64) -> ParityReport {
    ParityReport {
        config_hash: "x".into(),
        data_seed: 0,
        trials: 100,
        rows,
        zero_shot: ZeroShot {
            nav,
            nav_shifted: shifted,
            ratio: (nav > 0.0).then(|| shifted / nav),
        },
        policies: vec![],
        train_seconds: [("cross".to_owned(), Some(60.0))].into_iter().collect(),
        other_seconds: 6.0,
    }
}

fn rows(arm_cross: f64, quad_reward: f64) -> Vec<ParityRow> {
    vec![
        row("arm1", arm_cross, 0.60, None),
        row("nav", 0.90, 0.95, None),
        row("bimanual", 0.70, 0.65, None),
        row("quad", 1.0, 1.0, Some(quad_reward)),
    ]
}

#[test]
fn gap_boundary_is_inclusive() {
    assert!(report(rows(0.50, 0.9), 0.9, 0.5).parity_holds());
    assert!(!report(rows(0.49, 0.9), 0.9, 0.5).parity_holds());
    assert!(report(rows(0.70, 0.9), 0.9, 0.5).parity_holds());
}

#[test]
fn quad_reward_floor() {
    assert!(report(rows(0.6, 0.8), 0.9, 0.5).parity_holds());
    assert!(!report(rows(0.6, 0.79), 0.9, 0.5).parity_holds());
    let mut r = rows(0.6, 0.9);
    r[3].cross_reward = None;
    assert!(!report(r, 0.9, 0.5).parity_holds());
}

#[test]
fn zero_shot_half_of_nominal() {
    assert!(report(rows(0.6, 0.9), 0.8, 0.4).zero_shot_holds());
    assert!(!report(rows(0.6, 0.9), 0.8, 0.39).zero_shot_holds());
    // nothing to lose when the nominal policy never succeeds
    assert!(report(rows(0.6, 0.9), 0.0, 0.0).zero_shot_holds());
}

#[test]
fn report_json_round_trip() {
    let r = report(rows(0.6, 0.9), 0.8, 0.7);
    let back: ParityReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.table().lines().count(), 7);
    assert_eq!(r.total_seconds(), Some(66.0));
    let mut unknown = r;
    unknown.train_seconds.insert("nav-only".into(), None);
    assert_eq!(unknown.total_seconds(), None);
    assert!(unknown.table().contains("unknown"));
}
