use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::config::{Config, PAPER_MIXTURE_JSON};
use crate::encoders::{ImageObservation, ViewKind};
use crate::envs::generate_dataset;
use crate::error::Error;
use crate::heads::HeadKind;
use crate::model::PolicyModel;
use crate::rng::StreamRng;

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn nav_header() -> ShardHeader {
    ShardHeader::new(
        "toy",
        "nav",
        vec![StreamSpec::f32("navigation", &[3, 2, 2])],
        HeadKind::Navigation,
        32,
        Some("navigation"),
    )
}

fn random_traj(r: &mut StreamRng, steps: usize) -> TrajectoryRecord {
    let mut streams = BTreeMap::new();
    streams.insert("navigation".to_owned(), (0..steps * 12).map(|_| r.gen()).collect());
    streams.insert(ACTIONS.to_owned(), (0..steps * 2).map(|_| r.gen_range(-1.0..1.0)).collect());
    TrajectoryRecord {
        embodiment: "nav".into(),
        instruction: r.gen_range(0..32),
        steps,
        streams,
    }
}

#[test]
fn shard_round_trip_bit_exact() {
    let mut r = rng(1);
    let trajs: Vec<_> = (0..3).map(|i| random_traj(&mut r, 2 + i)).collect();
    let bytes = encode_shard(&nav_header(), &trajs).unwrap();
    assert_eq!(&bytes[..5], SHARD_MAGIC);
    let back = decode_shard(&bytes).unwrap();
    for (a, b) in back.trajectories.iter().zip(&trajs) {
        for (name, v) in &a.streams {
            let w = &b.streams[name];
            assert!(v.iter().zip(w).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    assert_eq!(back.trajectories, trajs);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.xeds");
    write_shard(&p, &nav_header(), &trajs).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(read_shard(&p).unwrap(), back);
}

#[test]
fn empty_shard_is_valid() {
    let bytes = encode_shard(&nav_header(), &[]).unwrap();
    let s = decode_shard(&bytes).unwrap();
    assert!(s.trajectories.is_empty());
    assert_eq!(s.header, nav_header());
    assert!(generate_dataset("quad", 0, 1).unwrap().trajectories.is_empty());
}

#[test]
fn schema_violations_are_format_errors() {
    let mut r = rng(2);
    let mut t = random_traj(&mut r, 3);
    // declared single-arm (7) actions, trajectory carries 2-dim actions
    let arm = ShardHeader::new(
        "toy",
        "nav",
        vec![StreamSpec::f32("navigation", &[3, 2, 2])],
        HeadKind::SingleArm,
        32,
        None,
    );
    assert!(matches!(encode_shard(&arm, &[t.clone()]), Err(Error::Format(_))));
    t.embodiment = "quad".into();
    assert!(matches!(encode_shard(&nav_header(), &[t]), Err(Error::Format(_))));
}

#[test]
fn bad_magic_and_truncation() {
    let mut r = rng(3);
    let bytes = encode_shard(&nav_header(), &[random_traj(&mut r, 4)]).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(matches!(decode_shard(&bad), Err(Error::Format(_))));
    for cut in [3, 7, bytes.len() - 1] {
        match decode_shard(&bytes[..cut]) {
            Err(Error::Corruption { offset, .. }) => assert!(offset <= cut as u64),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn window_spans() {
    let w = window_trajectory(1, 5);
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].lead_pad, 4);
    assert_eq!(window_trajectory(10, 5).len(), 10);
    let s = WindowSpan::ending_at(7, 5);
    assert_eq!((s.start, s.end, s.lead_pad), (3, 7, 0));
    assert_eq!(s.len(), 5);
}

#[test]
fn relabel_support() {
    let mut r = rng(4);
    for _ in 0..20 {
        assert_eq!(relabel_goal(9, 10, &mut r).unwrap(), 9);
    }
    assert!(matches!(relabel_goal(10, 10, &mut r), Err(Error::Range { .. })));
    let mut counts = [0usize; 4];
    for _ in 0..40_000 {
        counts[relabel_goal(0, 4, &mut r).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn relabeled_goal_uses_conditioning_view() {
    let shard = generate_dataset("nav", 1, 5).unwrap();
    let (model, _) = PolicyModel::init::<f32>(&Config::desk(), 0).unwrap();
    let spec = model.heads.spec(HeadKind::Navigation).unwrap();
    let traj = &shard.trajectories[0];
    let mut r = rng(6);
    let ex = build_example(&shard, traj, &model.layout, spec, 0, &AugmentConfig::default(), &mut r).unwrap();
    let goal = ex.frames[0].goal.as_ref().expect("nav examples keep the goal");
    assert_eq!(goal.view, ViewKind::Navigation);
    // quadruped examples never carry a goal
    let q = generate_dataset("quad", 1, 5).unwrap();
    let qs = model.heads.spec(HeadKind::Quadruped).unwrap();
    let ex = build_example(&q, &q.trajectories[0], &model.layout, qs, 3, &AugmentConfig::default(), &mut r).unwrap();
    assert!(ex.frames.iter().all(|f| f.goal.is_none() && f.instruction == 20));
}

#[test]
fn modality_masking() {
    let mut r = rng(7);
    for _ in 0..100 {
        let c = mask_modality(Conditioning { instruction: 0, goal: Some(1) }, &mut r);
        assert_eq!(c.goal, Some(1));
    }
    let mut kept = 0;
    for _ in 0..10_000 {
        let c = mask_modality(Conditioning { instruction: 3, goal: Some(1) }, &mut r);
        assert!((c.instruction == 0) != c.goal.is_none());
        kept += usize::from(c.goal.is_some());
    }
    assert!((kept as f64 / 10_000.0 - 0.5).abs() < 0.02, "{kept}");
}

#[test]
fn mixture_rules() {
    let mut r = rng(8);
    let single = MixtureSpec::new(&[("A", 1.0)]);
    for _ in 0..50 {
        assert_eq!(sample_mixture(&single, &mut r).unwrap(), "A");
    }
    let zero = MixtureSpec::new(&[("A", 0.0), ("B", 0.0)]);
    assert!(matches!(sample_mixture(&zero, &mut r), Err(Error::Config(_))));
    assert!(MixtureSpec::new(&[("A", -1.0), ("B", 1.0)]).validate().is_err());
    let unnormalized = MixtureSpec::new(&[("A", 2.0), ("B", 6.0)]);
    assert_eq!(
        unnormalized.normalized().unwrap(),
        vec![("A".to_owned(), 0.25), ("B".to_owned(), 0.75)]
    );
}

#[test]
fn desk_mixture_frequencies() {
    let spec = Config::desk().mixture;
    let sampler = MixtureSampler::new(&spec).unwrap();
    let mut r = rng(9);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..100_000 {
        *counts.entry(sampler.sample(&mut r).to_owned()).or_default() += 1;
    }
    for (name, w) in [("arm1", 0.4), ("nav", 0.3), ("bimanual", 0.2), ("quad", 0.1)] {
        let f = counts[name] as f64 / 100_000.0;
        assert!((f - w).abs() <= 0.005, "{name}: {f}");
    }
}

#[test]
fn large_mixture_weights() {
    let spec: MixtureSpec = serde_json::from_str(PAPER_MIXTURE_JSON).unwrap();
    let w: BTreeMap<String, f64> = spec.entries.iter().map(|e| (e.dataset.clone(), e.weight)).collect();
    for (name, pct) in [
        ("Bridge", 17.0),
        ("GNM", 17.0),
        ("ALOHA-multi-task", 17.0),
        ("Fractal", 17.0),
        ("Go1-walk", 8.5),
        ("Franka-tabletop", 8.5),
    ] {
        assert_eq!(w[name], pct, "{name}");
    }
    assert_eq!(spec.entries.len(), 28);
}

fn test_image(seed: u64) -> ImageObservation {
    let mut r = rng(seed);
    ImageObservation::new(ViewKind::Workspace, 24, (0..3 * 24 * 24).map(|_| r.gen()).collect()).unwrap()
}

#[test]
fn augmentation_identity_and_determinism() {
    let img = test_image(10);
    let off = AugmentConfig {
        enabled: true,
        max_shift: 0,
        contrast: 0.0,
        brightness: 0.0,
    };
    assert_eq!(augment(&img, &off, &mut rng(1)), img);
    let disabled = AugmentConfig {
        enabled: false,
        ..AugmentConfig::default()
    };
    assert_eq!(augment(&img, &disabled, &mut rng(1)), img);
    let cfg = AugmentConfig::default();
    assert_eq!(augment(&img, &cfg, &mut rng(2)), augment(&img, &cfg, &mut rng(2)));
}

#[test]
fn shift_moves_pixels_and_zero_fills() {
    let img = test_image(11);
    let p = AugmentParams {
        dx: 1,
        dy: 0,
        contrast: 1.0,
        brightness: 0.0,
    };
    let out = p.apply(&img);
    assert_eq!(out.pixels[0], img.pixels[1]);
    assert_eq!(out.pixels[23], 0.0);
}

#[test]
fn targets_past_the_end_are_masked() {
    let shard = generate_dataset("arm1", 1, 12).unwrap();
    let traj = &shard.trajectories[0];
    let (values, mask) = chunk_target(traj, 7, 4, traj.steps - 2).unwrap();
    assert_eq!(values.len(), 28);
    assert!(mask[..14].iter().all(|m| *m));
    assert!(mask[14..].iter().all(|m| !m));
    assert!(values[14..].iter().all(|v| *v == 0.0));
    assert_eq!(&values[..7], &traj.actions().unwrap()[(traj.steps - 2) * 7..(traj.steps - 1) * 7]);
}

#[test]
fn holdout_split() {
    let shard = generate_dataset("nav", 40, 13).unwrap();
    let (tr, va) = split_holdout(shard.clone(), 0.05, 0);
    assert_eq!((tr.trajectories.len(), va.trajectories.len()), (38, 2));
    let (tr2, va2) = split_holdout(shard.clone(), 0.05, 0);
    assert_eq!((tr, va), (tr2, va2));
    let (all, none) = split_holdout(shard, 0.0, 0);
    assert_eq!((all.trajectories.len(), none.trajectories.len()), (40, 0));
}

fn source(batch: usize) -> BatchSource {
    let c = Config::desk();
    let (model, _) = PolicyModel::init::<f32>(&c, 0).unwrap();
    let shards = ["arm1", "nav", "bimanual", "quad"]
        .iter()
        .map(|n| generate_dataset(n, 3, 14).unwrap())
        .collect();
    BatchSource::new(model.layout, &c.heads, shards, &c.mixture, c.train.augment, batch, 5).unwrap()
}

#[test]
fn batches_are_deterministic_and_prefetch_in_order() {
    let src = Arc::new(source(4));
    let direct: Vec<_> = (0..6).map(|i| src.batch(i).unwrap()).collect();
    assert_eq!(direct[2], src.batch(2).unwrap());
    assert_ne!(direct[0], direct[1]);
    let mut pf = Prefetcher::spawn(src, 0, 6);
    for want in &direct {
        assert_eq!(&pf.next_batch().unwrap().unwrap(), want);
    }
    assert!(pf.next_batch().is_none());
    for ex in &direct[0] {
        assert!(!ex.frames.is_empty() && ex.frames.len() <= 5);
        assert_eq!(ex.target.steps.len(), ex.frames.len());
    }
}

#[test]
fn unknown_dataset_in_mixture_is_rejected() {
    let c = Config::desk();
    let (model, _) = PolicyModel::init::<f32>(&c, 0).unwrap();
    let shards = vec![generate_dataset("nav", 2, 1).unwrap()];
    let mix = MixtureSpec::new(&[("nav", 1.0), ("missing", 1.0)]);
    assert!(BatchSource::new(model.layout, &c.heads, shards, &mix, c.train.augment, 2, 0).is_err());
}

proptest! {
    #[test]
    fn augmented_values_stay_in_unit_range(seed in any::<u64>()) {
        let img = test_image(seed);
        let out = augment(&img, &AugmentConfig { enabled: true, max_shift: 2, contrast: 0.5, brightness: 0.5 }, &mut rng(seed));
        prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn random_shards_round_trip(seed in any::<u64>(), n in 0usize..4) {
        let mut r = rng(seed);
        let trajs: Vec<_> = (0..n).map(|_| { let s = r.gen_range(1..5); random_traj(&mut r, s) }).collect();
        let bytes = encode_shard(&nav_header(), &trajs).unwrap();
        let back = decode_shard(&bytes).unwrap();
        prop_assert_eq!(encode_shard(&back.header, &back.trajectories).unwrap(), bytes);
    }

    #[test]
    fn relabel_stays_in_future(t in 0usize..50, extra in 1usize..50, seed in any::<u64>()) {
        let g = relabel_goal(t, t + extra, &mut rng(seed)).unwrap();
        prop_assert!((t..t + extra).contains(&g));
    }
}
