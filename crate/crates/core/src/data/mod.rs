//! Dataset ingestion: MVTec-style directory trees, a procedural toy
//! dataset, resizing, and few-shot augmentation.

mod augment;
pub mod imageops;
mod mvtec;
mod toy;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use augment::{few_shot_expand, few_shot_subset, Augmentation, FEW_SHOT_FOLD};
pub use mvtec::{load_mvtec_layout, materialize_mvtec_layout};
pub use toy::{generate_toy_dataset, DefectKind, ToySpec, MAX_DEFECT_FRACTION, MIN_DEFECT_FRACTION};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// A decoded image with its annotations. Pixels are `H × W × 3` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array3<f64>,
    pub category: String,
    pub split: Split,
    pub label: Label,
    pub gt_mask: Option<Array2<bool>>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Check the annotation invariants.
    pub fn validate(&self) -> Result<()> {
        if self.split == Split::Train && self.label == Label::Anomalous {
            return Err(Error::config(format!(
                "{}: training samples must be normal",
                self.id
            )));
        }
        let needs_mask = self.split == Split::Test && self.label == Label::Anomalous;
        match (&self.gt_mask, needs_mask) {
            (Some(m), true) => {
                if m.dim() != (self.height(), self.width()) {
                    return Err(Error::shape(format!(
                        "{}: mask {:?} vs image {:?}",
                        self.id,
                        m.dim(),
                        (self.height(), self.width())
                    )));
                }
                if !m.iter().any(|&v| v) {
                    return Err(Error::config(format!("{}: empty ground-truth mask", self.id)));
                }
                Ok(())
            }
            (None, false) => Ok(()),
            (Some(_), false) => Err(Error::config(format!(
                "{}: normal sample carries a mask",
                self.id
            ))),
            (None, true) => Err(Error::MaskPairing(PathBuf::from(&self.id))),
        }
    }

    /// Bilinear resize of pixels, nearest-neighbour resize of the mask.
    pub fn resize_and_normalize(&self, target: usize) -> Result<ImageSample> {
        resize_and_normalize(self, target)
    }
}

/// Resize a sample to `target × target`, keeping pixel values in `[0, 1]`.
pub fn resize_and_normalize(sample: &ImageSample, target: usize) -> Result<ImageSample> {
    if target == 0 {
        return Err(Error::config("resize target must be positive"));
    }
    if sample.height() == target && sample.width() == target {
        return Ok(sample.clone());
    }
    let mut pixels = imageops::resize_bilinear_rgb(sample.pixels.view(), target, target);
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let gt_mask = sample
        .gt_mask
        .as_ref()
        .map(|m| imageops::resize_nearest_mask(m.view(), target, target));
    Ok(ImageSample {
        pixels,
        gt_mask,
        ..sample.clone()
    })
}

/// Where a sample's pixels come from.
#[derive(Debug, Clone)]
pub enum Source {
    File {
        image: PathBuf,
        mask: Option<PathBuf>,
    },
    Memory {
        pixels: Arc<Array3<f64>>,
        mask: Option<Arc<Array2<bool>>>,
    },
    Augmented {
        base: Box<Source>,
        transform: Augmentation,
    },
}

impl Source {
    fn load(&self) -> Result<(Array3<f64>, Option<Array2<bool>>)> {
        match self {
            Source::File { image, mask } => {
                let px = imageops::read_rgb(image)?;
                let m = mask.as_deref().map(imageops::read_mask).transpose()?;
                Ok((px, m))
            }
            Source::Memory { pixels, mask } => {
                Ok((pixels.as_ref().clone(), mask.as_ref().map(|m| m.as_ref().clone())))
            }
            Source::Augmented { base, transform } => {
                let (px, m) = base.load()?;
                Ok((transform.apply(px.view()), m))
            }
        }
    }
}

/// Manifest entry: metadata plus a lazily-read pixel source.
#[derive(Debug, Clone)]
pub struct SampleRef {
    pub id: String,
    pub category: String,
    pub split: Split,
    pub label: Label,
    pub defect_type: String,
    pub source: Source,
}

impl SampleRef {
    /// Decode the sample. A pure read, safe to call from several threads.
    pub fn load(&self) -> Result<ImageSample> {
        let (pixels, gt_mask) = self.source.load()?;
        let s = ImageSample {
            id: self.id.clone(),
            pixels,
            category: self.category.clone(),
            split: self.split,
            label: self.label,
            gt_mask,
        };
        s.validate()?;
        Ok(s)
    }

    /// Decode and resize to `target × target`.
    pub fn load_resized(&self, target: usize) -> Result<ImageSample> {
        resize_and_normalize(&self.load()?, target)
    }

    pub fn has_mask(&self) -> bool {
        match &self.source {
            Source::File { mask, .. } => mask.is_some(),
            Source::Memory { mask, .. } => mask.is_some(),
            Source::Augmented { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

/// Ordered sample list plus the seed that fixes every iteration order.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRef>,
    pub categories: Vec<String>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &SampleRef> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleRef> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == Split::Train)
            .collect()
    }

    /// Training-sample order for `epoch`: a seeded shuffle of the training
    /// indices, a pure function of the manifest contents, seed and epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut idx = self.train_indices();
        let mut rng = rng_for(self.seed, Stream::Shuffle, &[epoch as u64]);
        idx.shuffle(&mut rng);
        idx
    }

    /// Restrict to one category (one-class setting).
    pub fn only_category(&self, category: &str) -> DatasetManifest {
        DatasetManifest {
            samples: self
                .samples
                .iter()
                .filter(|s| s.category == category)
                .cloned()
                .collect(),
            categories: vec![category.to_string()],
            seed: self.seed,
        }
    }

    pub fn counts(&self) -> BTreeMap<String, CategoryCounts> {
        let mut out: BTreeMap<String, CategoryCounts> = self
            .categories
            .iter()
            .map(|c| (c.clone(), CategoryCounts::default()))
            .collect();
        for s in &self.samples {
            let e = out.entry(s.category.clone()).or_default();
            match (s.split, s.label) {
                (Split::Train, _) => e.train += 1,
                (Split::Test, Label::Normal) => e.test_normal += 1,
                (Split::Test, Label::Anomalous) => e.test_anomalous += 1,
            }
        }
        out
    }

    pub fn mask_count(&self) -> usize {
        self.samples.iter().filter(|s| s.has_mask()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(split: Split, label: Label, mask: Option<Array2<bool>>) -> ImageSample {
        ImageSample {
            id: "s".into(),
            pixels: Array3::from_elem((4, 4, 3), 0.3),
            category: "c".into(),
            split,
            label,
            gt_mask: mask,
        }
    }

    #[test]
    fn validate_enforces_mask_pairing() {
        let mut m = Array2::from_elem((4, 4), false);
        assert!(sample(Split::Test, Label::Anomalous, None).validate().is_err());
        assert!(sample(Split::Test, Label::Anomalous, Some(m.clone()))
            .validate()
            .is_err());
        m[[1, 1]] = true;
        assert!(sample(Split::Test, Label::Anomalous, Some(m.clone()))
            .validate()
            .is_ok());
        assert!(sample(Split::Test, Label::Normal, Some(m)).validate().is_err());
        assert!(sample(Split::Train, Label::Anomalous, None).validate().is_err());
        assert!(sample(Split::Train, Label::Normal, None).validate().is_ok());
    }

    #[test]
    fn resize_identity_and_constant() {
        let s = sample(Split::Train, Label::Normal, None);
        assert_eq!(resize_and_normalize(&s, 4).unwrap(), s);
        let r = resize_and_normalize(&s, 9).unwrap();
        assert_eq!(r.pixels.dim(), (9, 9, 3));
        assert!(r.pixels.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(resize_and_normalize(&s, 0).is_err());
    }

    #[test]
    fn resize_448_to_224() {
        let mut s = sample(Split::Train, Label::Normal, None);
        s.pixels = Array3::from_shape_fn((448, 448, 3), |(y, x, c)| {
            ((y + x + c) % 256) as f64 / 255.0
        });
        let r = resize_and_normalize(&s, 224).unwrap();
        assert_eq!(r.pixels.dim(), (224, 224, 3));
        assert!(r.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
