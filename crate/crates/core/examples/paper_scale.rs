//! Builds the paper-scale model (12 layers, width 512), checks the slot
//! layout and runs one forward pass per action head.

use std::time::Instant;

use crossbody::envs::Env;
use crossbody::heads::HeadKind;
use crossbody::{Config, PolicyModel};

fn main() -> crossbody::Result<()> {
    let config = Config::paper_scale();
    let (model, store) = PolicyModel::init::<f32>(&config, 0)?;
    let l = &model.layout;
    println!(
        "{} parameters; {} tokens per step, context {}",
        store.numel(),
        l.step_tokens(),
        l.context_len()
    );
    for (embodiment, head) in [
        ("arm1", HeadKind::SingleArm),
        ("nav", HeadKind::Navigation),
        ("bimanual", HeadKind::Bimanual),
        ("quad", HeadKind::Quadruped),
    ] {
        let (mut env, frame, _) = Env::reset(embodiment, 0)?;
        let mut frames = vec![frame];
        while frames.len() < l.history() {
            let a = env.expert_action();
            frames.push(env.step(&a)?.0);
        }
        let start = Instant::now();
        let chunk = model.predict(&store, &frames, head)?;
        println!(
            "{embodiment:<9} {head} chunk {:?} in {:.2} s",
            chunk.values.shape(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
