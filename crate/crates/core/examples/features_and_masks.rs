//! Extract multi-layer features with the frozen toy encoder, fuse them,
//! and save the prior attention mask of one image.
//!
//! cargo run --release --example features_and_masks

use agp::data::imageops::{write_gray, write_rgb};
use agp::data::{generate_toy_dataset, ToySpec};
use agp::encoder::{encoder_from_config, fuse_features, EncoderConfig};
use agp::mask::prior_mask;

fn main() -> agp::Result<()> {
    let manifest = generate_toy_dataset(&ToySpec::default())?;
    let encoder = encoder_from_config(&EncoderConfig::toy())?;
    let sample = manifest.train().next().expect("toy data has training images").load()?;

    let stack = encoder.extract_one(sample.pixels.view())?;
    let fused = fuse_features(&stack)?;
    let prior = prior_mask(&stack)?;
    println!("layers {:?}", stack.layer_ids);
    println!("fused features {:?}", fused.dim());
    println!("prior mask {:?}, range [{:.3}, {:.3}]", prior.dim(),
        prior.values.fold(f64::INFINITY, |a, &b| a.min(b)),
        prior.values.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));

    write_rgb("sample.png".as_ref(), sample.pixels.view())?;
    write_gray("prior_mask.png".as_ref(), prior.values.view())?;
    println!("wrote sample.png and prior_mask.png");
    Ok(())
}
