//! Generate the synthetic anomaly dataset and write it in the MVTec layout.
//!
//! cargo run --release --example toy_dataset -- [out_dir]

use std::path::PathBuf;

use agp::data::{generate_toy_dataset, materialize_mvtec_layout, ToySpec};

fn main() -> agp::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "toy_data".into());
    let spec = ToySpec::default();
    let manifest = generate_toy_dataset(&spec)?;
    for (category, c) in manifest.counts() {
        println!(
            "{category}: {} train, {} good test, {} defective test",
            c.train, c.test_normal, c.test_anomalous
        );
    }
    println!("{} ground-truth masks", manifest.mask_count());
    materialize_mvtec_layout(&manifest, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
