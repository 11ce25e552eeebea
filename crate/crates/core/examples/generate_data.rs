//! Generates small expert datasets, writes them as shards and reads them
//! back.
//!
//! ```text
//! cargo run --release --example generate_data -- [out dir] [trajectories]
//! ```

use std::path::PathBuf;

use crossbody::cli::{gen_data, load_shards};

fn main() -> crossbody::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("crossbody-data"));
    let n: usize = args.next().map(|s| s.parse().expect("trajectory count")).unwrap_or(20);
    let sets: Vec<(String, usize)> = ["arm1", "nav", "bimanual", "quad"]
        .iter()
        .map(|e| (e.to_string(), n))
        .collect();
    for p in gen_data(&out, &sets, 0)? {
        println!("wrote {} ({} bytes)", p.display(), std::fs::metadata(&p).map(|m| m.len()).unwrap_or(0));
    }
    for shard in load_shards(&out)? {
        let steps: usize = shard.trajectories.iter().map(|t| t.steps).sum();
        println!(
            "{:<9} {} trajectories, {steps} steps, mean length {:.1}",
            shard.header.embodiment,
            shard.trajectories.len(),
            steps as f64 / shard.trajectories.len() as f64
        );
    }
    Ok(())
}
