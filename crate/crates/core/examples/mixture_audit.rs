//! Draws from the desk mixture and the paper-scale mixture and compares the
//! observed dataset frequencies with the configured weights.

use crossbody::cli::{mixture_audit, MIXTURE_TOLERANCE};
use crossbody::config::PAPER_MIXTURE_JSON;
use crossbody::datapipe::MixtureSpec;
use crossbody::Config;

fn main() -> crossbody::Result<()> {
    let paper: MixtureSpec = serde_json::from_str(PAPER_MIXTURE_JSON)?;
    for (label, spec) in [("desk", Config::desk().mixture), ("paper", paper)] {
        println!("{label} mixture, 100000 draws");
        let mut worst: f64 = 0.0;
        for (name, w, f) in mixture_audit(&spec, 100_000, 0)? {
            println!("  {name:<28} weight {w:.4}  observed {f:.4}");
            worst = worst.max((w - f).abs());
        }
        println!("  max deviation {worst:.4} (tolerance {MIXTURE_TOLERANCE})");
    }
    Ok(())
}
