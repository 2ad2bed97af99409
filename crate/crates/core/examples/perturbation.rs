//! The two perturbation levels: the feature-noise intensity curriculum,
//! the image-mask ratio ramp, and one perturbed image.
//!
//! cargo run --release --example perturbation

use agp::data::imageops::write_rgb;
use agp::data::{generate_toy_dataset, ToySpec};
use agp::encoder::{encoder_from_config, fuse_features, EncoderConfig};
use agp::mask::{final_mask, prior_mask, MaskSource};
use agp::perturb::{alpha_at, image_mask_ratio_at, perturb_features, perturb_image, NoiseSchedule};

fn main() -> agp::Result<()> {
    let sched = NoiseSchedule::default();
    println!("epoch  alpha  image ratio");
    for t in [0, 50, 100, 200, 300, 400, 500] {
        println!("{t:5}  {:.3}  {:.3}", alpha_at(t, &sched), image_mask_ratio_at(t, &sched));
    }

    let manifest = generate_toy_dataset(&ToySpec::default())?;
    let encoder = encoder_from_config(&EncoderConfig::toy())?;
    let image = manifest.train().next().expect("training image").load()?.pixels;
    let stack = encoder.extract_one(image.view())?;
    let clean = fuse_features(&stack)?;
    let prior = prior_mask(&stack)?;
    // Without a trained teacher the prior alone is the guidance map.
    let guide = final_mask(&prior, &prior, MaskSource::L)?;

    let noisy = perturb_features(&clean, &guide, 400, &sched, 1)?;
    let shift = (&noisy.features - &clean.values).mapv(|v| v * v).mean().unwrap_or(0.0).sqrt();
    println!("feature perturbation at epoch 400: rms shift {shift:.3}");

    let img = perturb_image(image.view(), &guide, 0.6, &sched, 2)?;
    let n = img.selected.iter().filter(|&&s| s).count();
    println!("image perturbation: {n} of {} pixels noised", img.selected.len());
    write_rgb("perturbed.png".as_ref(), img.image.view())?;
    println!("wrote perturbed.png");
    Ok(())
}
