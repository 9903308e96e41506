//! Writes a synthetic workspace that the `qrank` binary can run on.
//!
//! ```text
//! cargo run --example synthetic_workspace -- /tmp/qrank-demo
//! cargo run --bin qrank -- prepare -c /tmp/qrank-demo/config.toml
//! cargo run --bin qrank -- train -c /tmp/qrank-demo/config.toml --set train.aux='["qa"]'
//! ```

use qrank::synthetic::{write_workspace, SyntheticSpec};

fn main() -> qrank::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "qrank-demo".into());
    let spec = SyntheticSpec { groups: 200, seed: 11, ..Default::default() };
    let config = write_workspace(&dir, &spec, 2000)?;
    println!("wrote {}", config.display());
    Ok(())
}
