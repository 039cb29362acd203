//! Regenerates the bundled synthetic tasks: `cargo run --example gen_data [DIR]`
//! (default `data/` at the repository root).

use std::path::PathBuf;

use seqcont_cli::commands::{write_bundled, BUNDLED};

fn main() -> anyhow::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    for (name, ..) in BUNDLED {
        write_bundled(name, &root.join(name))?;
        println!("wrote {}", root.join(name).display());
    }
    Ok(())
}
