//! Runs each scripted expert in its own environment and reports success
//! rates, episode lengths and the random-policy quadruped reward.

use crossbody::envs::{Env, EMBODIMENTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> crossbody::Result<()> {
    let episodes = 200;
    for spec in &EMBODIMENTS {
        let (mut ok, mut steps, mut reward) = (0, 0, 0.0);
        for seed in 0..episodes {
            let (mut env, _, _) = Env::reset(spec.name, seed)?;
            while !env.done() {
                let a = env.expert_action();
                env.step(&a)?;
                reward += env.reward().unwrap_or(0.0);
            }
            ok += usize::from(env.success());
            steps += env.steps_taken();
        }
        println!(
            "{:<12} success {:>5.3}  mean length {:>6.1}  mean reward {:.3}",
            spec.name,
            ok as f64 / episodes as f64,
            steps as f64 / episodes as f64,
            reward / steps as f64
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let (mut env, _, _) = Env::reset("quad", 0)?;
    while !env.done() {
        let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-std::f32::consts::PI..=std::f32::consts::PI)).collect();
        env.step(&a)?;
        total += env.reward().unwrap_or(0.0);
    }
    println!("random quad policy normalized reward {:.3}", total / env.steps_taken() as f64);
    Ok(())
}
