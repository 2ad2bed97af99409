//! Image AUROC, pixel AUROC and PRO on hand-made score maps.
//!
//! cargo run --release --example metrics

use agp::metrics::{auroc, pixel_auroc, pro, pro_curve};
use ndarray::Array2;

fn main() -> agp::Result<()> {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    println!("image AUROC {:.3}", auroc(&scores, &labels)?);

    let mut mask = Array2::from_elem((16, 16), false);
    for y in 4..8 {
        for x in 4..10 {
            mask[[y, x]] = true;
        }
    }
    let map = Array2::from_shape_fn((16, 16), |(y, x)| {
        let base = ((y * 16 + x) % 7) as f64 / 10.0;
        if mask[[y, x]] { base + 0.3 } else { base }
    });
    let maps = [map.view()];
    let masks = [Some(mask.view())];
    println!("pixel AUROC {:.3}", pixel_auroc(&maps, &masks)?);
    println!("PRO (FPR <= 0.3) {:.3}", pro(&maps, &masks, 0.3)?);
    for p in pro_curve(&maps, &masks)?.iter().step_by(2) {
        println!("  threshold {:.2}: fpr {:.3} pro {:.3}", p.threshold, p.fpr, p.pro);
    }
    Ok(())
}
