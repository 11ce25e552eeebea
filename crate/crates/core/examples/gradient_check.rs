//! Finite-difference check of the full policy gradient at 64-bit.
//!
//! ```text
//! cargo run --release --example gradient_check -- [eps] [uniform probes] [mse]
//! ```

use std::time::Instant;

use crossbody::cli::{grad_check, GradCheckOptions};
use crossbody::heads::LossKind;
use crossbody::Config;

fn main() -> crossbody::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut opts = GradCheckOptions::default();
    if let Some(e) = args.first() {
        opts.eps = e.parse().expect("eps");
    }
    if let Some(n) = args.get(1) {
        opts.uniform_probes = n.parse().expect("probe count");
    }
    if args.get(2).is_some_and(|a| a == "mse") {
        opts.loss = LossKind::Mse;
    }
    let start = Instant::now();
    let report = grad_check(&Config::desk(), 0, &opts)?;
    let mut probes = report.checked.clone();
    probes.sort_by(|a, b| b.rel_err().total_cmp(&a.rel_err()));
    for p in probes.iter().take(8) {
        println!(
            "{:<40} {:>6}  analytic {:+.6e}  numeric {:+.6e}  rel {:.2e}",
            p.param,
            p.index,
            p.analytic,
            p.numeric,
            p.rel_err()
        );
    }
    println!(
        "eps {:e}: {} probes, {} kinks, max relative error {:.3e} in {:.1?}",
        opts.eps,
        report.checked.len(),
        report.kinks.len(),
        report.max_rel_err,
        start.elapsed()
    );
    Ok(())
}
