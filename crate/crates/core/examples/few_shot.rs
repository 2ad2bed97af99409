//! Few-shot training: k normal images per category, each expanded into 32
//! rotated and flipped variants.
//!
//! cargo run --release --example few_shot -- [k]

use agp::config::ExperimentConfig;
use agp::experiment::{train_and_evaluate, training_manifest};
use agp::train::Setting;

fn main() -> agp::Result<()> {
    let k: usize = std::env::args().nth(1).map_or(2, |s| s.parse().expect("k"));
    let mut cfg = ExperimentConfig::toy(7);
    cfg.train.setting = Setting::FewShot;
    cfg.train.few_shot_k = k;
    cfg.train.epochs = 20;

    let expanded = training_manifest(&cfg, &cfg.resolved()?.manifest()?)?;
    println!("{k}-shot: {} training images after expansion", expanded.train().count());

    let (result, _) = train_and_evaluate(&cfg)?;
    println!("{}", result.to_table());
    Ok(())
}
