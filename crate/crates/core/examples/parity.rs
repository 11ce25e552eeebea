//! Cross-embodiment policy against the four specialists, plus zero-shot
//! navigation under shifted dynamics. Takes about two hours on one core;
//! results are cached and a rerun only re-reads the report.
//!
//! ```text
//! cargo run --release --example parity -- [cache root] [trials]
//! ```

use std::path::PathBuf;

use crossbody::cli::{parity_run, ParityOptions};
use crossbody::Config;

fn main() -> crossbody::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let root = args
        .first()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/parity"));
    let mut opts = ParityOptions {
        verbose: true,
        ..Default::default()
    };
    if let Some(n) = args.get(1) {
        opts.trials = n.parse().expect("trial count");
    }
    let report = parity_run(&Config::parity(), &root, &opts)?;
    print!("{}", report.table());
    println!("parity holds: {}", report.parity_holds());
    println!("zero-shot holds: {}", report.zero_shot_holds());
    Ok(())
}
