//! Load a checkpoint, score its test split, print metrics and write
//! per-image heatmaps.
//!
//! cargo run --release --example evaluate_checkpoint -- toy_run/model.agp [heatmap_dir]

use std::path::PathBuf;

use agp::archive::Archive;
use agp::experiment::evaluate_model;
use agp::score::write_heatmaps;
use agp::train::model_from_checkpoint;

fn main() -> agp::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "toy_run/model.agp".into()));
    let heatmaps = args.next().map(PathBuf::from).unwrap_or_else(|| "heatmaps".into());

    let (model, config) = model_from_checkpoint(&Archive::read(&path)?)?;
    let manifest = config.manifest()?;
    let (result, maps) = evaluate_model(&model, &manifest, &config.score)?;
    println!("{}", result.to_table());

    let mut ranked: Vec<_> = maps.iter().collect();
    ranked.sort_by(|a, b| b.image_score.total_cmp(&a.image_score));
    for m in ranked.iter().take(5) {
        println!("{:40} {:?} {:.4}", m.sample_id, m.label, m.image_score);
    }
    write_heatmaps(&heatmaps, &maps)?;
    println!("wrote {} heatmaps to {}", maps.len(), heatmaps.display());
    Ok(())
}
