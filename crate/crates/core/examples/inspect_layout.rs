//! Prints the desk slot layout, parameter counts and the attention mask
//! seen by one embodiment.
//!
//! ```text
//! cargo run --release --example inspect_layout -- [embodiment]
//! ```

use crossbody::cli::inspect;
use crossbody::Config;

fn main() -> crossbody::Result<()> {
    let embodiment = std::env::args().nth(1).unwrap_or_else(|| "nav".into());
    print!("{}", inspect(&Config::desk(), Some(&embodiment))?);
    Ok(())
}
