//! Compare the noise strategies (image/feature: none, random, attention)
//! on the toy dataset.
//!
//! cargo run --release --example noise_ablation -- [epochs] [seeds...]

use agp::config::ExperimentConfig;
use agp::experiment::train_and_evaluate;

fn main() -> agp::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(50, |e| e.parse().expect("epochs"));
    let mut seeds: Vec<u64> = args.map(|s| s.parse().expect("seed")).collect();
    if seeds.is_empty() {
        seeds.push(7);
    }
    println!("image/feature | I-AUC  P-AUC  PRO");
    for arm in ["-/-", "-/R", "-/A", "A/A"] {
        let mut sums = [0.0; 3];
        for &seed in &seeds {
            let mut cfg = ExperimentConfig::toy(seed);
            cfg.train.epochs = epochs;
            cfg.apply_override("noise", arm)?;
            let (r, _) = train_and_evaluate(&cfg)?;
            sums[0] += r.mean.i_auc;
            sums[1] += r.mean.p_auc;
            sums[2] += r.mean.pro;
        }
        let n = seeds.len() as f64;
        println!("{arm:13} | {:.3}  {:.3}  {:.3}", sums[0] / n, sums[1] / n, sums[2] / n);
    }
    Ok(())
}
