//! Overfits the desk model on eight expert trajectories per embodiment.
//! The training L1 should drop below 0.05 within 2000 steps.

use std::time::Instant;

use crossbody::envs::generate_dataset;
use crossbody::trainer::{train, TrainOptions};
use crossbody::Config;

fn main() -> crossbody::Result<()> {
    let config = Config::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.json"))?;
    let shards = ["arm1", "nav", "bimanual", "quad"]
        .iter()
        .enumerate()
        .map(|(i, n)| generate_dataset(n, 8, 100 + i as u64))
        .collect::<crossbody::Result<Vec<_>>>()?;
    let out = std::env::temp_dir().join("crossbody-smoke");
    let start = Instant::now();
    let outcome = train(&config, shards, &out, &TrainOptions { verbose: true })?;
    let last = outcome.log.last().expect("training logs");
    println!(
        "step {}: train L1 {:.4} after {:.0} s",
        last.step,
        last.train_l1,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
