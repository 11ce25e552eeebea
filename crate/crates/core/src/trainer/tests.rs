use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::autodiff::{Gradients, ParamStore, Tensor};
use crate::config::{Config, TrainConfig};
use crate::envs::generate_dataset;
use crate::error::Error;
use crate::rng::StreamRng;

fn desk_train() -> TrainConfig {
    Config::desk().train
}

#[test]
fn schedule_values() {
    let c = desk_train();
    assert_relative_eq!(lr_schedule(2000, &c).unwrap(), 3e-4, max_relative = 1e-12);
    assert_relative_eq!(lr_schedule(8000, &c).unwrap(), 1.5e-4, max_relative = 1e-12);
    assert_relative_eq!(lr_schedule(1000, &c).unwrap(), 1.5e-4, max_relative = 1e-12);
    assert!(matches!(lr_schedule(0, &c), Err(Error::Contract(_))));
}

#[test]
fn schedule_shape() {
    let c = desk_train();
    let lr = |s| lr_schedule(s, &c).unwrap();
    for s in 1..2000 {
        assert!(lr(s + 1) > lr(s));
    }
    for s in 2000..12_000 {
        assert!(lr(s + 1) < lr(s));
    }
    // both branches meet at the peak
    assert_relative_eq!(lr(1999), lr(2001), max_relative = 2e-3);
}

fn store(shapes: &[&[usize]]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        s.insert(&format!("p{i}"), Tensor::zeros(sh), true);
    }
    s
}

fn fill(grads: &mut Gradients<f64>, values: &[f64]) {
    let mut it = values.iter().copied();
    for (_, g) in grads.iter_mut() {
        for v in g.data_mut() {
            *v = it.next().unwrap();
        }
    }
}

#[test]
fn clipping_examples() {
    let s = store(&[&[2], &[2]]);
    let mut g = Gradients::zeros(&s);
    fill(&mut g, &[1.0, 1.0, 1.0, 1.0]);
    assert_relative_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 2.0);
    for (_, t) in g.iter() {
        assert!(t.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }
    let mut small = Gradients::zeros(&s);
    fill(&mut small, &[0.25, 0.25, 0.25, 0.25]);
    assert_relative_eq!(clip_global_norm(&mut small, 1.0).unwrap(), 0.5);
    assert!(small.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.25)));
    fill(&mut small, &[0.0, f64::NAN, 0.0, 0.0]);
    assert!(matches!(clip_global_norm(&mut small, 1.0), Err(Error::Evaluation(_))));
}

#[test]
fn adamw_first_step() {
    let mut s = store(&[&[3]]);
    s.get_mut(s.ids().next().unwrap()).data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
    let mut g = Gradients::zeros(&s);
    fill(&mut g, &[0.3, -7.0, 0.0]);
    let mut state = OptimizerState::new(&s);
    let opt = AdamW::new(0.0);
    adamw_step(&mut s, &g, &mut state, 1e-2, &opt).unwrap();
    let p = s.get(s.ids().next().unwrap()).data().to_vec();
    // bias-corrected first step moves by lr * g / (|g| + eps)
    assert_relative_eq!(p[0], 1.0 - 1e-2 * 0.3 / (0.3 + 1e-8), max_relative = 1e-12);
    assert_relative_eq!(p[1], -2.0 + 1e-2 * 7.0 / (7.0 + 1e-8), max_relative = 1e-12);
    assert_eq!(p[2], 0.5);
    assert_eq!(state.step, 1);
}

#[test]
fn weight_decay_is_decoupled() {
    let mut s = ParamStore::<f64>::new();
    let a = s.insert("w", Tensor::new(&[1], vec![2.0]).unwrap(), true);
    let b = s.insert("bias", Tensor::new(&[1], vec![2.0]).unwrap(), false);
    let g = Gradients::zeros(&s);
    let mut state = OptimizerState::new(&s);
    adamw_step(&mut s, &g, &mut state, 0.1, &AdamW::new(0.5)).unwrap();
    assert_relative_eq!(s.get(a).data()[0], 2.0 * (1.0 - 0.05));
    assert_eq!(s.get(b).data()[0], 2.0);
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let target = [0.7, -0.3, 1.1, 0.0];
    let mut s = store(&[&[4]]);
    let id = s.ids().next().unwrap();
    let mut state = OptimizerState::new(&s);
    let opt = AdamW::new(0.0);
    let loss = |p: &[f64]| p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    for _ in 0..200 {
        let p = s.get(id).data().to_vec();
        let mut g = Gradients::zeros(&s);
        g.get_mut(id)
            .data_mut()
            .iter_mut()
            .zip(p.iter().zip(&target))
            .for_each(|(gi, (a, b))| *gi = 2.0 * (a - b));
        adamw_step(&mut s, &g, &mut state, 0.05, &opt).unwrap();
    }
    assert!(loss(s.get(id).data()) < 1e-3, "{}", loss(s.get(id).data()));
}

#[test]
fn optimizer_rejects_mismatched_state() {
    let mut s = store(&[&[2]]);
    let other = store(&[&[2], &[1]]);
    let g = Gradients::zeros(&s);
    let mut state = OptimizerState::new(&other);
    assert!(matches!(
        adamw_step(&mut s, &g, &mut state, 1e-3, &AdamW::new(0.0)),
        Err(Error::Dimension(_))
    ));
}

fn metrics(v: Option<f64>) -> Metrics {
    Metrics {
        train_l1: None,
        val_mse: Default::default(),
        mean_val_mse: v,
    }
}

#[test]
fn selection_rule() {
    assert_eq!(select(&[]), None);
    assert_eq!(select(&[metrics(None), metrics(None)]), Some(1));
    let ms = [metrics(Some(0.3)), metrics(Some(0.1)), metrics(None), metrics(Some(0.1))];
    assert_eq!(select(&ms), Some(1));
}

fn tiny_config() -> Config {
    let mut c = Config::desk();
    c.train.batch_size = 2;
    c.train.total_steps = 6;
    c.train.val_every = 3;
    c.train.log_every = 2;
    c.train.val_windows = 3;
    c.train.holdout_fraction = 0.25;
    c
}

fn tiny_shards() -> Vec<crate::datapipe::DatasetShard> {
    ["arm1", "nav", "bimanual", "quad"]
        .iter()
        .enumerate()
        .map(|(i, n)| generate_dataset(n, 4, 40 + i as u64).unwrap())
        .collect()
}

#[test]
fn training_is_reproducible() {
    let c = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train(&c, tiny_shards(), a.path(), &TrainOptions::default()).unwrap();
    let rb = train(&c, tiny_shards(), b.path(), &TrainOptions::default()).unwrap();
    assert_eq!(ra.log, rb.log);
    assert_eq!(ra.checkpoints.len(), 2);
    assert_eq!(ra.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 3, 4, 6]);
    for name in ["ckpt-000003.xckpt", "ckpt-000006.xckpt", "progress.jsonl"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
    let best = Checkpoint::load(ra.best_path()).unwrap();
    assert_eq!(best.metrics.val_mse.len(), 4);
    assert_eq!(best.optimizer.as_ref().unwrap().step, best.step);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let c = Config::desk();
    let (model, mut store) = crate::model::PolicyModel::init::<f32>(&c, 3).unwrap();
    let mut r = StreamRng::seed_from_u64(1);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
    }
    let ck = Checkpoint {
        config: c.clone(),
        layout: model.layout.canonical(),
        step: 7,
        metrics: metrics(Some(0.5)),
        params: store.clone(),
        optimizer: None,
    };
    let bytes = ck.encode().unwrap();
    assert_eq!(&bytes[..6], CHECKPOINT_MAGIC);
    let back = Checkpoint::decode(&bytes).unwrap();
    for (x, y) in back.params.ids().zip(store.ids()) {
        assert_eq!(back.params.name(x), store.name(y));
        assert_eq!(back.params.get(x), store.get(y));
    }
    assert_eq!((back.step, back.optimizer.is_none()), (7, true));
    assert_eq!(back.encode().unwrap(), bytes);

    match Checkpoint::decode(&bytes[..bytes.len() - 3]) {
        Err(Error::Corruption { .. }) => {}
        other => panic!("{other:?}"),
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::decode(&trailing), Err(Error::Corruption { .. })));
    let mut magic = bytes;
    magic[0] = b'Y';
    assert!(matches!(Checkpoint::decode(&magic), Err(Error::Format(_))));
}

#[test]
fn layout_mismatch_is_incompatible() {
    let c = Config::desk();
    let (model, store) = crate::model::PolicyModel::init::<f32>(&c, 0).unwrap();
    let ck = Checkpoint {
        config: c.clone(),
        layout: model.layout.canonical(),
        step: 0,
        metrics: Metrics::default(),
        params: store,
        optimizer: None,
    };
    ck.check_compatible(&c).unwrap();
    let mut other = c;
    other.layout.history = 4;
    assert!(matches!(ck.check_compatible(&other), Err(Error::Compatibility { .. })));
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(values in prop::collection::vec(-100.0f64..100.0, 6), t in 0.1f64..3.0) {
        let s = store(&[&[2], &[4]]);
        let mut g = Gradients::zeros(&s);
        fill(&mut g, &values);
        let before = clip_global_norm(&mut g, t).unwrap();
        let after = g.global_norm();
        prop_assert!(after <= t * (1.0 + 1e-6));
        if before <= t {
            prop_assert!((after - before).abs() <= 1e-12 * before.max(1.0));
        }
    }

    #[test]
    fn schedule_never_exceeds_peak(s in 1u64..1_000_000) {
        let c = desk_train();
        let lr = lr_schedule(s, &c).unwrap();
        prop_assert!(lr > 0.0 && lr <= c.peak_lr * (1.0 + 1e-12));
    }
}
