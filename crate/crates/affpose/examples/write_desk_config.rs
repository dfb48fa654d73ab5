//! Regenerates `configs/desk.json` from the built-in desk profile.
//!
//! Usage: `cargo run --example write_desk_config [-- <output-path>]`

use affpose::train::ExperimentConfig;

fn main() -> affpose::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "configs/desk.json".to_string());
    let config = ExperimentConfig::desk_profile();
    config.save(std::path::Path::new(&path))?;
    println!("wrote {path}");
    Ok(())
}
