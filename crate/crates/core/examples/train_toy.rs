//! Train the multi-class model on the toy dataset, writing the log and
//! checkpoint to a directory, then evaluate it.
//!
//! cargo run --release --example train_toy -- [out_dir] [epochs]

use std::path::PathBuf;

use agp::config::ExperimentConfig;
use agp::experiment::{evaluate_model, train_run};

fn main() -> agp::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| "toy_run".into());
    let mut config = ExperimentConfig::toy(7);
    if let Some(e) = args.next() {
        config.train.epochs = e.parse().expect("epochs must be an integer");
    }
    std::fs::create_dir_all(&out)?;

    let manifest = config.resolved()?.manifest()?;
    let run = train_run(&config, &manifest, Some(&out), None)?;
    run.config.save(&out.join("config.json"))?;
    let first = run.log.first().map_or(f64::NAN, |r| r.l_total);
    let last = run.log.last().map_or(f64::NAN, |r| r.l_total);
    println!("{} steps, loss {first:.4} -> {last:.4}", run.log.len());

    let (result, _) = evaluate_model(&run.model()?, &manifest, &run.config.score)?;
    println!("{}", result.to_table());
    println!("checkpoint at {}", out.join("model.agp").display());
    Ok(())
}
