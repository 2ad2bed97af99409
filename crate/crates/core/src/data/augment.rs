//! Few-shot expansion: 8 dihedral transforms × 4 small-angle rotations.

use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{imageops, DatasetManifest, SampleRef, Source, Split};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

pub const FEW_SHOT_FOLD: usize = 32;

/// Rotation magnitudes (degrees) paired with every dihedral element.
const ANGLE_STEPS: [f64; 4] = [0.0, 5.0, 10.0, 15.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Dihedral element in `0..8`.
    pub dihedral: u8,
    /// Pre-rotation in degrees (reflect padding).
    pub degrees: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        dihedral: 0,
        degrees: 0.0,
    };

    pub fn apply(&self, pixels: ArrayView3<f64>) -> Array3<f64> {
        let rotated = imageops::rotate_reflect(pixels, self.degrees);
        let mut out = imageops::dihedral(rotated.view(), self.dihedral);
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

/// The 32 transforms used for one base image. The rotation sign for each
/// nonzero magnitude is drawn from `(seed, sample_index, dihedral)`.
pub fn augmentations_for(seed: u64, sample_index: usize) -> Vec<Augmentation> {
    let mut out = Vec::with_capacity(FEW_SHOT_FOLD);
    for d in 0..8u8 {
        let mut rng = rng_for(seed, Stream::Augment, &[sample_index as u64, d as u64]);
        for &mag in &ANGLE_STEPS {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            out.push(Augmentation {
                dihedral: d,
                degrees: if mag == 0.0 { 0.0 } else { sign * mag },
            });
        }
    }
    out
}

/// Keep `k` seeded-random training images per category; test split untouched.
pub fn few_shot_subset(manifest: &DatasetManifest, k: usize) -> Result<DatasetManifest> {
    if k == 0 {
        return Err(Error::config("few-shot k must be positive"));
    }
    let mut keep = vec![true; manifest.samples.len()];
    for (ci, cat) in manifest.categories.iter().enumerate() {
        let mut idx: Vec<usize> = (0..manifest.samples.len())
            .filter(|&i| {
                let s = &manifest.samples[i];
                s.split == Split::Train && &s.category == cat
            })
            .collect();
        if idx.len() < k {
            return Err(Error::config(format!(
                "category {cat} has {} training images, fewer than k={k}",
                idx.len()
            )));
        }
        let mut rng = rng_for(manifest.seed, Stream::Subset, &[ci as u64]);
        idx.shuffle(&mut rng);
        for &i in &idx[k..] {
            keep[i] = false;
        }
    }
    Ok(DatasetManifest {
        samples: manifest
            .samples
            .iter()
            .zip(keep)
            .filter_map(|(s, k)| k.then(|| s.clone()))
            .collect(),
        categories: manifest.categories.clone(),
        seed: manifest.seed,
    })
}

/// Expand every training image into its 32 rotate/flip variants.
/// Requires exactly `k` training images per category.
pub fn few_shot_expand(manifest: &DatasetManifest, k: usize) -> Result<DatasetManifest> {
    if k == 0 {
        return Err(Error::config("few-shot k must be positive"));
    }
    for (cat, c) in manifest.counts() {
        if c.train != k {
            return Err(Error::config(format!(
                "category {cat} has {} training images, expected exactly {k}",
                c.train
            )));
        }
    }
    let mut samples = Vec::with_capacity(manifest.samples.len() * FEW_SHOT_FOLD);
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.split != Split::Train {
            samples.push(s.clone());
            continue;
        }
        for (j, aug) in augmentations_for(manifest.seed, i).into_iter().enumerate() {
            let source = if aug == Augmentation::IDENTITY {
                s.source.clone()
            } else {
                Source::Augmented {
                    base: Box::new(s.source.clone()),
                    transform: aug,
                }
            };
            samples.push(SampleRef {
                id: format!("{}@aug{j:02}", s.id),
                source,
                ..s.clone()
            });
        }
    }
    Ok(DatasetManifest {
        samples,
        categories: manifest.categories.clone(),
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToySpec};
    use std::collections::HashSet;

    fn toy(cats: usize, k: usize) -> DatasetManifest {
        generate_toy_dataset(&ToySpec {
            n_categories: cats,
            n_train_per_cat: k,
            n_test_normal: 1,
            n_test_anomalous: 1,
            image_size: 32,
            ..ToySpec::default()
        })
        .unwrap()
    }

    #[test]
    fn one_shot_gives_32_distinct_variants_including_original() {
        let m = toy(1, 1);
        let e = few_shot_expand(&m, 1).unwrap();
        assert_eq!(e.train().count(), 32);
        assert_eq!(e.test().count(), 2);
        let original = m.train().next().unwrap().load().unwrap().pixels;
        let variants: Vec<_> = e.train().map(|s| s.load().unwrap().pixels).collect();
        assert!(variants.contains(&original));
        let distinct: HashSet<Vec<u64>> = variants
            .iter()
            .map(|v| v.iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 32);
    }

    #[test]
    fn four_shot_fifteen_categories() {
        let m = toy(15, 4);
        let e = few_shot_expand(&m, 4).unwrap();
        assert_eq!(e.train().count(), 4 * 32 * 15);
    }

    #[test]
    fn rejects_bad_k() {
        let m = toy(1, 3);
        assert!(few_shot_expand(&m, 0).is_err());
        assert!(few_shot_expand(&m, 2).is_err());
        let sub = few_shot_subset(&m, 2).unwrap();
        assert_eq!(sub.train().count(), 2);
        assert!(few_shot_expand(&sub, 2).is_ok());
    }
}
