//! Interrupt training, resume from the on-disk checkpoint, and confirm the
//! result matches an uninterrupted run bit for bit.
//!
//! cargo run --release --example resume

use agp::archive::Archive;
use agp::config::ExperimentConfig;
use agp::experiment::train_run;
use agp::train::state_from_checkpoint;

fn main() -> agp::Result<()> {
    let mut cfg = ExperimentConfig::toy(7);
    cfg.train.epochs = 6;
    let full = cfg.resolved()?;
    let manifest = full.manifest()?;

    let straight = train_run(&full, &manifest, None, None)?;

    let dir = std::env::temp_dir().join("agp_resume_example");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir)?;
    let mut first_half = full.clone();
    first_half.train.epochs = 3;
    train_run(&first_half, &manifest, Some(&dir), None)?;
    let state = state_from_checkpoint(&Archive::read(&dir.join("model.agp"))?)?;
    println!("resuming at epoch {} (step {})", state.epoch, state.global_step);
    let resumed = train_run(&full, &manifest, None, Some(state))?;

    println!("uninterrupted: {}", straight.state.params.hash_hex());
    println!("resumed:       {}", resumed.state.params.hash_hex());
    println!("identical: {}", straight.state.params == resumed.state.params);
    Ok(())
}
