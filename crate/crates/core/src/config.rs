//! Experiment configuration: one JSON document covering data, encoder,
//! decoder, noise curriculum, training and scoring, plus `key=value`
//! overrides used by the command line and ablation grids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{generate_toy_dataset, load_mvtec_layout, DatasetManifest, ToySpec};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mask::MaskSource;
use crate::perturb::NoiseSchedule;
use crate::score::ScoreConfig;
use crate::train::{NoiseArm, TrainConfig};

/// Epoch count the default schedules are written for.
pub const REFERENCE_EPOCHS: usize = 500;

/// The fifteen MVTec-AD categories.
pub const MVTEC_CATEGORIES: [&str; 15] = [
    "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut", "pill",
    "screw", "tile", "toothbrush", "transistor", "wood", "zipper",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Generate a synthetic dataset instead of reading `root`.
    pub toy: Option<ToySpec>,
    pub root: Option<PathBuf>,
    /// Categories to read from `root`; empty means all fifteen.
    pub categories: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            toy: Some(ToySpec::default()),
            root: None,
            categories: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub noise: NoiseSchedule,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    /// Scale the noise ramps by `train.epochs / 500` when resolving.
    /// Cleared once applied.
    pub compress_schedules: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy(7)
    }
}

impl ExperimentConfig {
    /// Full-scale configuration: external ViT-S/16 encoder, 224 px input.
    pub fn full(root: PathBuf, weights: PathBuf) -> Self {
        let encoder = EncoderConfig {
            weights_path: Some(weights),
            ..EncoderConfig::default()
        };
        Self {
            name: "mvtec".into(),
            data: DataConfig {
                toy: None,
                root: Some(root),
                categories: Vec::new(),
            },
            decoder: DecoderConfig {
                dim: encoder.dim,
                ..DecoderConfig::default()
            },
            encoder,
            noise: NoiseSchedule::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            compress_schedules: false,
        }
    }

    /// Desk-scale configuration on the synthetic dataset.
    pub fn toy(seed: u64) -> Self {
        let encoder = EncoderConfig::toy();
        let toy = ToySpec {
            seed,
            patch_size: encoder.patch_size,
            ..ToySpec::default()
        };
        Self {
            name: "toy".into(),
            train: TrainConfig {
                epochs: 50,
                batch_size: 8,
                lr: 3e-3,
                seed,
                image_size: toy.image_size,
                ..TrainConfig::default()
            },
            data: DataConfig {
                toy: Some(toy),
                root: None,
                categories: Vec::new(),
            },
            decoder: DecoderConfig {
                dim: encoder.dim,
                heads: encoder.heads,
                seed,
                ..DecoderConfig::default()
            },
            encoder,
            noise: NoiseSchedule::default(),
            // An 8×8 grid cell already spans an eighth of the image.
            score: ScoreConfig { pool_window: 1 },
            compress_schedules: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        crate::archive::write_atomic(path, text.as_bytes())
    }

    /// Change the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.decoder.seed = seed;
        if let Some(toy) = self.data.toy.as_mut() {
            toy.seed = seed;
        }
    }

    /// Apply schedule compression and cross-field defaults; the result is
    /// what gets written next to run outputs and reproduces the run as is.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.compress_schedules {
            let factor = c.train.epochs as f64 / REFERENCE_EPOCHS as f64;
            c.noise = c.noise.compressed(factor);
            c.compress_schedules = false;
        }
        if let Some(toy) = c.data.toy.as_mut() {
            toy.patch_size = c.encoder.patch_size;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.noise.validate()?;
        self.decoder.validate()?;
        self.encoder.validate_layers(self.encoder.depth)?;
        if self.decoder.dim != self.encoder.dim {
            return Err(Error::config(format!(
                "decoder.dim ({}) must equal encoder.dim ({})",
                self.decoder.dim, self.encoder.dim
            )));
        }
        if self.train.image_size % self.encoder.patch_size != 0 {
            return Err(Error::config(format!(
                "train.image_size {} is not a multiple of patch size {}",
                self.train.image_size, self.encoder.patch_size
            )));
        }
        if self.data.toy.is_none() && self.data.root.is_none() {
            return Err(Error::Usage("no dataset: give a toy spec or a root".into()));
        }
        Ok(())
    }

    /// Build the dataset manifest this configuration points at.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        match (&self.data.toy, &self.data.root) {
            (Some(toy), _) => generate_toy_dataset(toy),
            (None, Some(root)) => {
                let cats = if self.data.categories.is_empty() {
                    discover_categories(root)
                } else {
                    self.data.categories.clone()
                };
                load_mvtec_layout(root, &cats, self.train.seed)
            }
            (None, None) => Err(Error::Usage("no dataset: give a toy spec or a root".into())),
        }
    }

    /// Apply a comma-separated override list such as
    /// `train.epochs=20,noise=image:attention,feature:random,mask=D`.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<()> {
        for (key, value) in split_overrides(spec)? {
            self.apply_override(&key, &value)?;
        }
        Ok(())
    }

    /// Apply one override. Besides dotted paths into the JSON document,
    /// the short keys `noise`, `mask`, `teacher`, `layers`, `seed` and
    /// `epochs` are accepted.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "noise" => {
                let (img, feat) = parse_noise_pair(value)?;
                self.train.image_noise = img;
                self.train.feature_noise = feat;
            }
            "mask" => self.train.mask_source = value.parse::<MaskSource>()?,
            "teacher" => {
                self.train.mean_teacher = match value {
                    "on" | "true" | "ema" => true,
                    "off" | "false" | "none" => false,
                    _ => return Err(Error::Usage(format!("teacher expects on/off, got {value:?}"))),
                }
            }
            "layers" => {
                let ids = value
                    .split([':', ',', ' '])
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Usage(format!("bad layer list {value:?}: {e}")))?;
                self.encoder.layer_ids = ids;
            }
            "seed" => {
                let seed = value
                    .parse()
                    .map_err(|e| Error::Usage(format!("bad seed {value:?}: {e}")))?;
                self.set_seed(seed);
            }
            "epochs" => self.apply_override("train.epochs", value)?,
            _ => self.set_path(key, value)?,
        }
        Ok(())
    }

    fn set_path(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Usage(format!("unknown config key {key:?}")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Usage(format!("bad value for {key}: {e}")))?;
        Ok(())
    }
}

/// Subdirectories of `root` that contain `train/good`, sorted. Falls back
/// to the fifteen standard names so a missing root reports them.
fn discover_categories(root: &Path) -> Vec<String> {
    let mut found: Vec<String> = std::fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().join("train").join("good").is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    if found.is_empty() {
        return MVTEC_CATEGORIES.iter().map(|s| s.to_string()).collect();
    }
    found.sort();
    found
}

/// Split `a=1,b=x,y,c=2` into pairs; a piece without `=` continues the
/// previous value, so list values may contain commas.
pub fn split_overrides(spec: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for piece in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match piece.split_once('=') {
            Some((k, v)) if !k.contains(':') => out.push((k.trim().to_string(), v.trim().to_string())),
            _ => match out.last_mut() {
                Some((_, v)) => {
                    v.push(',');
                    v.push_str(piece);
                }
                None => return Err(Error::Usage(format!("override {piece:?} is not key=value"))),
            },
        }
    }
    Ok(out)
}

/// Parse `A/A`, `-/R` (image/feature codes) or `image:attention,feature:random`.
pub fn parse_noise_pair(value: &str) -> Result<(NoiseArm, NoiseArm)> {
    if let Some((img, feat)) = value.split_once('/') {
        return Ok((img.parse()?, feat.parse()?));
    }
    let (mut img, mut feat) = (NoiseArm::Off, NoiseArm::Off);
    for part in value.split(',').filter(|s| !s.is_empty()) {
        let (level, arm) = part
            .split_once(':')
            .ok_or_else(|| Error::Usage(format!("noise part {part:?} is not level:arm")))?;
        match level {
            "image" | "img" => img = arm.parse()?,
            "feature" | "feat" => feat = arm.parse()?,
            _ => return Err(Error::Usage(format!("unknown noise level {level:?}"))),
        }
    }
    Ok((img, feat))
}
