//! Times one forward/backward pass per embodiment on synthetic windows.

use std::collections::BTreeMap;
use std::time::Instant;

use crossbody::assembler::{Observation, ObservationFrame};
use crossbody::datapipe::TrainingExample;
use crossbody::encoders::{ImageObservation, ProprioKind, ProprioObservation, ViewKind};
use crossbody::heads::{ElementTarget, HeadKind, LossKind, StepTarget};
use crossbody::{Config, PolicyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(view: ViewKind, rng: &mut impl Rng) -> Observation {
    Observation::Image(ImageObservation::new(view, 24, (0..3 * 576).map(|_| rng.gen()).collect()).unwrap())
}

fn example(groups: &[(&str, Option<ViewKind>, Option<ProprioKind>)], head: HeadKind, chunk: usize, rng: &mut impl Rng) -> TrainingExample {
    let frames = (0..5)
        .map(|_| ObservationFrame {
            embodiment: head.to_string(),
            observations: groups
                .iter()
                .map(|(n, v, p)| {
                    let o = match (v, p) {
                        (Some(v), _) => image(*v, rng),
                        (_, Some(k)) => Observation::Proprio(ProprioObservation {
                            kind: *k,
                            values: (0..k.dim()).map(|_| rng.gen()).collect(),
                        }),
                        _ => unreachable!(),
                    };
                    (n.to_string(), o)
                })
                .collect::<BTreeMap<_, _>>(),
            instruction: 3,
            goal: None,
        })
        .collect();
    let n = chunk * head.action_dim();
    TrainingExample {
        dataset: head.to_string(),
        frames,
        target: ElementTarget {
            head: Some(head),
            steps: (0..5)
                .map(|s| StepTarget { step: s, values: vec![0.1; n], mask: vec![true; n] })
                .collect(),
        },
    }
}

fn main() {
    let cfg = Config::desk();
    let (model, store) = PolicyModel::init::<f32>(&cfg, 0).unwrap();
    println!("parameters: {}", store.numel());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = [
        ("arm1", vec![("workspace", Some(ViewKind::Workspace), None), ("wrist-left", Some(ViewKind::WristLeft), None)], HeadKind::SingleArm, 4),
        ("nav", vec![("navigation", Some(ViewKind::Navigation), None)], HeadKind::Navigation, 4),
        ("bimanual", vec![("wrist-left", Some(ViewKind::WristLeft), None), ("wrist-right", Some(ViewKind::WristRight), None), ("proprio-bimanual", None, Some(ProprioKind::Bimanual))], HeadKind::Bimanual, 20),
        ("quad", vec![("proprio-quadruped", None, Some(ProprioKind::Quadruped))], HeadKind::Quadruped, 1),
    ];
    for (name, groups, head, chunk) in cases {
        let batch: Vec<_> = (0..8).map(|_| example(&groups, head, chunk, &mut rng)).collect();
        let t = Instant::now();
        let (loss, _) = model.loss_and_grads(&store, &batch, LossKind::L1).unwrap();
        println!("{name}: {:.2} ms/example (loss {loss:.3})", t.elapsed().as_secs_f64() * 1e3 / 8.0);
    }
}
