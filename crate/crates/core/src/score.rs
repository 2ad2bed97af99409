//! Anomaly maps from reconstruction error and dataset-level scoring.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::imageops::{resize_bilinear, write_gray};
use crate::data::{DatasetManifest, ImageSample, Label};
use crate::decoder::Decoder;
use crate::encoder::{fuse_features, Encoder};
use crate::error::{Error, Result};
use crate::metrics::EvalItem;
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    /// Side of the average-pooling window applied before the image max.
    pub pool_window: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { pool_window: 3 }
    }
}

/// Per-pixel anomaly scores for one test image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub sample_id: String,
    pub category: String,
    pub label: Label,
    /// Reconstruction error at feature resolution.
    pub feature_map: Array2<f64>,
    /// `feature_map` bilinearly upsampled to the image size.
    pub pixel_scores: Array2<f64>,
    pub image_score: f64,
    pub gt_mask: Option<Array2<bool>>,
}

impl AnomalyMap {
    pub fn eval_item(&self) -> EvalItem<'_> {
        EvalItem {
            category: &self.category,
            anomalous: self.label.is_anomalous(),
            image_score: self.image_score,
            pixel_scores: self.pixel_scores.view(),
            gt_mask: self.gt_mask.as_ref().map(|m| m.view()),
        }
    }
}

/// Euclidean distance over channels at every position.
pub fn reconstruction_error(input: ArrayView3<f64>, output: ArrayView3<f64>) -> Result<Array2<f64>> {
    if input.dim() != output.dim() {
        return Err(Error::shape(format!(
            "decoder input {:?} vs output {:?}",
            input.dim(),
            output.dim()
        )));
    }
    let (h, w, c) = input.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c)
            .map(|ch| {
                let d = input[[y, x, ch]] - output[[y, x, ch]];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }))
}

/// Mean filter with stride 1 and same-size output; border windows average
/// only the in-range cells.
pub fn average_pool(map: ArrayView2<f64>, window: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let r = window / 2;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1) = (y.saturating_sub(r), (y + window - r).min(h));
        let (x0, x1) = (x.saturating_sub(r), (x + window - r).min(w));
        let mut acc = 0.0;
        for yy in y0..y1 {
            for xx in x0..x1 {
                acc += map[[yy, xx]];
            }
        }
        acc / ((y1 - y0) * (x1 - x0)) as f64
    })
}

/// Image-level score: maximum of the average-pooled feature-resolution map.
pub fn image_score(map: ArrayView2<f64>, window: usize) -> f64 {
    let pooled = average_pool(map, window.max(1));
    pooled.fold(0.0f64, |a, &b| a.max(b))
}

/// Frozen encoder plus trained decoder: everything inference needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub params: ParamSet,
    pub image_size: usize,
}

impl TrainedModel {
    pub fn new(encoder: Encoder, decoder: Decoder, params: ParamSet, image_size: usize) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::Usage("model has no trained decoder parameters".into()));
        }
        decoder.check_params(&params)?;
        if decoder.config().dim != encoder.dim() {
            return Err(Error::Usage(format!(
                "decoder width {} does not match encoder width {}",
                decoder.config().dim,
                encoder.dim()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            params,
            image_size,
        })
    }
}

/// Score one sample. No perturbation is applied: the decoder sees the
/// clean fused features and the map is the distance between its input and
/// output.
pub fn score(sample: &ImageSample, model: &TrainedModel, cfg: &ScoreConfig) -> Result<AnomalyMap> {
    let sample = sample.resize_and_normalize(model.image_size)?;
    let stack = model.encoder.extract_one(sample.pixels.view())?;
    let clean = fuse_features(&stack)?;
    let (out, _) = model.decoder.forward(&model.params, clean.values.view());
    let feature_map = reconstruction_error(clean.values.view(), out.reconstructed.view())?;
    let pixel_scores = resize_bilinear(feature_map.view(), sample.height(), sample.width());
    let image_score = image_score(feature_map.view(), cfg.pool_window);
    Ok(AnomalyMap {
        sample_id: sample.id.clone(),
        category: sample.category.clone(),
        label: sample.label,
        feature_map,
        pixel_scores,
        image_score,
        gt_mask: sample.gt_mask.clone(),
    })
}

/// Score the test split in manifest order.
pub fn score_dataset(
    manifest: &DatasetManifest,
    model: &TrainedModel,
    cfg: &ScoreConfig,
) -> Result<Vec<AnomalyMap>> {
    manifest
        .test()
        .map(|s| score(&s.load()?, model, cfg))
        .collect()
}

/// `sample_id, category, label, image_score`
pub fn write_score_table(path: &Path, maps: &[AnomalyMap]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "category", "label", "image_score"])?;
    for m in maps {
        w.write_record([
            m.sample_id.as_str(),
            m.category.as_str(),
            match m.label {
                Label::Normal => "normal",
                Label::Anomalous => "anomalous",
            },
            &format!("{:.17e}", m.image_score),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// File-system-safe version of a sample id.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

const AMAP_MAGIC: &[u8; 8] = b"AGPAMAP1";
const AMAP_DTYPE_F64: u32 = 1;

/// Raw score map: `b"AGPAMAP1"`, then little-endian `u32` dtype tag
/// (1 = f64), `u32` height, `u32` width, then `H·W` little-endian f64
/// values in row-major order.
pub fn write_raw_map(path: &Path, map: ArrayView2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = Vec::with_capacity(20 + 8 * h * w);
    buf.extend_from_slice(AMAP_MAGIC);
    buf.extend_from_slice(&AMAP_DTYPE_F64.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_raw_map(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    let bad = || Error::load(format!("malformed score map {}", path.display()), vec![]);
    if bytes.len() < 20 || &bytes[..8] != AMAP_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(8) != AMAP_DTYPE_F64 as usize {
        return Err(bad());
    }
    let (h, w) = (word(12), word(16));
    if bytes.len() != 20 + 8 * h * w {
        return Err(bad());
    }
    let vals = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((h, w), vals).map_err(|_| bad())
}

/// `<id>_amap.png` (per-image min-max scaled) and `<id>_amap.npyish` (raw).
pub fn write_heatmaps(dir: &Path, maps: &[AnomalyMap]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in maps {
        let stem = sanitize_id(&m.sample_id);
        let scaled = crate::mask::normalize(m.pixel_scores.view())?;
        write_gray(&dir.join(format!("{stem}_amap.png")), scaled.view())?;
        write_raw_map(&dir.join(format!("{stem}_amap.npyish")), m.pixel_scores.view())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let f = Array3::from_shape_fn((3, 3, 4), |(y, x, c)| (y + x + c) as f64);
        let m = reconstruction_error(f.view(), f.view()).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert_eq!(image_score(m.view(), 3), 0.0);
    }

    #[test]
    fn euclidean_norm_over_channels() {
        let a = Array3::<f64>::zeros((2, 2, 2));
        let mut b = a.clone();
        b[[1, 0, 0]] = 3.0;
        b[[1, 0, 1]] = 4.0;
        let m = reconstruction_error(a.view(), b.view()).unwrap();
        assert_eq!(m, array![[0.0, 0.0], [5.0, 0.0]]);
    }

    #[test]
    fn pooling_smooths_single_spikes() {
        let mut m = Array2::<f64>::zeros((5, 5));
        m[[2, 2]] = 9.0;
        assert!((image_score(m.view(), 3) - 1.0).abs() < 1e-12);
        assert_eq!(image_score(m.view(), 1), 9.0);
        let c = Array2::from_elem((4, 4), 2.5);
        assert_eq!(average_pool(c.view(), 3), c);
    }

    #[test]
    fn raw_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x_amap.npyish");
        let m = array![[0.25, 1.5, 3.0], [7.0, 0.0, 1e-9]];
        write_raw_map(&p, m.view()).unwrap();
        assert_eq!(read_raw_map(&p).unwrap(), m);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"AGPAMAP1");
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    }

    #[test]
    fn upsampling_never_exceeds_map_max() {
        let m = array![[0.0, 2.0], [1.0, 0.5]];
        let up = resize_bilinear(m.view(), 16, 16);
        assert!(up.iter().all(|&v| (0.0..=2.0).contains(&v)));
    }
}
