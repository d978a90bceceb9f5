//! Writes a synthetic two-local desk scene and its config.
//!
//! Usage: `cargo run --example make_scene -- <dir> [image-seed]`

use std::path::PathBuf;

use fusecond::scene::Scene;

fn main() -> fusecond::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "scene".into()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let path = Scene::desk(seed).write(&dir)?;
    println!("{}", path.display());
    Ok(())
}
