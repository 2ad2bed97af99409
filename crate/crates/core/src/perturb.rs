//! Pseudo-anomaly synthesis: attention-weighted Gaussian noise on features
//! and ratio-scheduled masked Gaussian noise on images.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::imageops::resize_bilinear;
use crate::encoder::CleanFeatures;
use crate::error::{Error, Result};
use crate::mask::{normalize, AttentionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageNoiseMode {
    /// Add noise to the selected pixels.
    #[default]
    Additive,
    /// Overwrite the selected pixels with noise centred on mid-gray.
    Replace,
}

/// Curriculum parameters for both perturbation levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    /// Basic noise factor.
    pub gamma: f64,
    /// Maximum noise intensity.
    pub p: f64,
    /// Minimum noise intensity.
    pub m: f64,
    /// Horizon in epochs; later epochs hold the final value.
    pub t_max: usize,
    /// Attention-independent noise floor.
    pub beta: f64,
    pub img_ratio_start: f64,
    pub img_ratio_end: f64,
    pub img_ramp_start_epoch: usize,
    pub img_ramp_end_epoch: usize,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub image_noise_mean: f64,
    pub image_noise_std: f64,
    pub image_noise_mode: ImageNoiseMode,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            p: 1.0,
            m: 0.0,
            t_max: 400,
            beta: 0.05,
            img_ratio_start: 0.6,
            img_ratio_end: 1.0,
            img_ramp_start_epoch: 100,
            img_ramp_end_epoch: 400,
            noise_mean: 0.0,
            noise_std: 1.0,
            image_noise_mean: 0.0,
            image_noise_std: 0.2,
            image_noise_mode: ImageNoiseMode::Additive,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::config("noise schedule horizon must be positive"));
        }
        if !(0.0 <= self.img_ratio_start
            && self.img_ratio_start <= self.img_ratio_end
            && self.img_ratio_end <= 1.0)
        {
            return Err(Error::config(format!(
                "need 0 <= img_ratio_start ({}) <= img_ratio_end ({}) <= 1",
                self.img_ratio_start, self.img_ratio_end
            )));
        }
        if self.img_ramp_start_epoch > self.img_ramp_end_epoch {
            return Err(Error::config("image ramp start after ramp end"));
        }
        if !(self.noise_std > 0.0) || !(self.image_noise_std > 0.0) {
            return Err(Error::config("noise standard deviations must be positive"));
        }
        if self.gamma < 0.0 || self.beta < 0.0 {
            return Err(Error::config("gamma and beta must be nonnegative"));
        }
        Ok(())
    }

    /// Rescale every epoch-valued field by `factor` (e.g. `50 / 500`).
    pub fn compressed(&self, factor: f64) -> Self {
        let sc = |e: usize| ((e as f64 * factor).round() as usize).max(1);
        Self {
            t_max: sc(self.t_max),
            img_ramp_start_epoch: sc(self.img_ramp_start_epoch),
            img_ramp_end_epoch: sc(self.img_ramp_end_epoch),
            ..self.clone()
        }
    }
}

/// Feature-noise intensity at epoch `t`: `γ · (t/T · (p − m) + m)`,
/// held at its `t = T` value afterwards.
pub fn alpha_at(t: usize, sched: &NoiseSchedule) -> f64 {
    let t = t.min(sched.t_max) as f64;
    sched.gamma * (t / sched.t_max as f64 * (sched.p - sched.m) + sched.m)
}

/// Fraction of image pixels that receive noise at epoch `t`.
pub fn image_mask_ratio_at(t: usize, sched: &NoiseSchedule) -> f64 {
    if t <= sched.img_ramp_start_epoch {
        return sched.img_ratio_start;
    }
    if t >= sched.img_ramp_end_epoch {
        return sched.img_ratio_end;
    }
    let span = (sched.img_ramp_end_epoch - sched.img_ramp_start_epoch) as f64;
    let frac = (t - sched.img_ramp_start_epoch) as f64 / span;
    sched.img_ratio_start + frac * (sched.img_ratio_end - sched.img_ratio_start)
}

/// i.i.d. `N(mean, std)` tensor drawn in row-major order from `seed`.
pub fn noise_tensor(shape: (usize, usize, usize), mean: f64, std: f64, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, std).expect("positive std");
    Array3::from_shape_simple_fn(shape, || dist.sample(&mut rng))
}

/// Perturbed features of one sample plus the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedBatch {
    pub features: Array3<f64>,
    pub noise_realization_seed: u64,
}

fn weighted_noise(
    clean: &CleanFeatures,
    weight: ArrayView2<f64>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<PerturbedBatch> {
    let (h, w, c) = clean.dim();
    if weight.dim() != (h, w) {
        return Err(Error::shape(format!(
            "mask {:?} does not match feature grid {:?}",
            weight.dim(),
            (h, w)
        )));
    }
    let noise = noise_tensor((h, w, c), sched.noise_mean, sched.noise_std, seed);
    let mut features = clean.values.clone();
    for y in 0..h {
        for x in 0..w {
            let k = weight[[y, x]];
            for ch in 0..c {
                features[[y, x, ch]] += noise[[y, x, ch]] * k;
            }
        }
    }
    Ok(PerturbedBatch {
        features,
        noise_realization_seed: seed,
    })
}

/// `F' = F_clean + E ⊙ (α(t) · norm(mask) + β)`, one weight per position
/// broadcast over channels.
pub fn perturb_features(
    clean: &CleanFeatures,
    mask: &AttentionMask,
    t: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<PerturbedBatch> {
    let alpha = alpha_at(t, sched);
    let weight = normalize(mask.values.view())?.mapv(|v| alpha * v + sched.beta);
    weighted_noise(clean, weight.view(), sched, seed)
}

/// Uniform-guidance variant: the normalized mask is replaced by ones.
pub fn random_feature_noise(
    clean: &CleanFeatures,
    t: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<PerturbedBatch> {
    let (h, w, _) = clean.dim();
    let weight = Array2::from_elem((h, w), alpha_at(t, sched) + sched.beta);
    weighted_noise(clean, weight.view(), sched, seed)
}

/// Select the `count` highest-scoring pixels; ties go to the lower
/// row-major index.
pub fn top_k_mask(scores: ArrayView2<f64>, count: usize) -> Array2<bool> {
    let (h, w) = scores.dim();
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| {
        scores[[b / w, b % w]]
            .total_cmp(&scores[[a / w, a % w]])
            .then(a.cmp(&b))
    });
    let mut mask = Array2::from_elem((h, w), false);
    for &i in order.iter().take(count) {
        mask[[i / w, i % w]] = true;
    }
    mask
}

/// Image after masked noise, plus the binary selection used.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedImage {
    pub image: Array3<f64>,
    pub selected: Array2<bool>,
    pub noise_realization_seed: u64,
}

fn apply_pixel_noise(
    image: ArrayView3<f64>,
    selected: Array2<bool>,
    sched: &NoiseSchedule,
    seed: u64,
) -> PerturbedImage {
    let (h, w, c) = image.dim();
    let noise = noise_tensor(
        (h, w, c),
        sched.image_noise_mean,
        sched.image_noise_std,
        seed,
    );
    let mut out = image.to_owned();
    for y in 0..h {
        for x in 0..w {
            if !selected[[y, x]] {
                continue;
            }
            for ch in 0..c {
                let v = match sched.image_noise_mode {
                    ImageNoiseMode::Additive => out[[y, x, ch]] + noise[[y, x, ch]],
                    ImageNoiseMode::Replace => 0.5 + noise[[y, x, ch]],
                };
                out[[y, x, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }
    PerturbedImage {
        image: out,
        selected,
        noise_realization_seed: seed,
    }
}

fn checked_count(ratio: f64, pixels: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("image mask ratio {ratio} outside [0, 1]")));
    }
    Ok((ratio * pixels as f64).round() as usize)
}

/// Upsample the final mask to image size, keep the top `ratio` fraction of
/// pixels by mask value, and add Gaussian noise inside them.
pub fn perturb_image(
    image: ArrayView3<f64>,
    final_mask: &AttentionMask,
    ratio: f64,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<PerturbedImage> {
    let (h, w, _) = image.dim();
    let count = checked_count(ratio, h * w)?;
    let upsampled = resize_bilinear(final_mask.values.view(), h, w);
    let selected = top_k_mask(upsampled.view(), count);
    Ok(apply_pixel_noise(image, selected, sched, seed))
}

/// Same as [`perturb_image`] but the selected pixels are a uniform random
/// subset of the same size.
pub fn perturb_image_random(
    image: ArrayView3<f64>,
    ratio: f64,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<PerturbedImage> {
    let (h, w, _) = image.dim();
    let count = checked_count(ratio, h * w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5E1E_C7ED);
    let scores = Array2::from_shape_simple_fn((h, w), || rng.random::<f64>());
    let selected = top_k_mask(scores.view(), count);
    Ok(apply_pixel_noise(image, selected, sched, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskRole;
    use ndarray::array;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn alpha_examples() {
        let s = sched();
        assert_eq!(alpha_at(0, &s), 0.0);
        assert_eq!(alpha_at(200, &s), 0.5);
        assert_eq!(alpha_at(400, &s), 1.0);
        assert_eq!(alpha_at(450, &s), 1.0);
    }

    #[test]
    fn ratio_examples() {
        let s = sched();
        assert_eq!(image_mask_ratio_at(50, &s), 0.6);
        assert!((image_mask_ratio_at(250, &s) - 0.8).abs() < 1e-12);
        assert_eq!(image_mask_ratio_at(400, &s), 1.0);
    }

    #[test]
    fn compressed_schedule_scales_epochs() {
        let s = sched().compressed(0.1);
        assert_eq!(s.t_max, 40);
        assert_eq!(s.img_ramp_start_epoch, 10);
        assert_eq!(s.img_ramp_end_epoch, 40);
    }

    fn clean() -> CleanFeatures {
        CleanFeatures {
            values: Array3::from_shape_fn((2, 3, 4), |(y, x, c)| (y + 2 * x) as f64 - c as f64),
        }
    }

    fn mask(values: Array2<f64>) -> AttentionMask {
        AttentionMask {
            values,
            role: MaskRole::Final,
        }
    }

    #[test]
    fn zero_intensity_is_identity() {
        let s = NoiseSchedule {
            beta: 0.0,
            ..sched()
        };
        let m = mask(Array2::from_shape_fn((2, 3), |(y, x)| (y * 3 + x) as f64));
        let out = perturb_features(&clean(), &m, 0, &s, 11).unwrap();
        assert_eq!(out.features, clean().values);
        let out = random_feature_noise(&clean(), 0, &s, 11).unwrap();
        assert_eq!(out.features, clean().values);
    }

    #[test]
    fn floor_only_noise() {
        let s = NoiseSchedule {
            beta: 0.1,
            ..sched()
        };
        let m = mask(Array2::zeros((2, 3)));
        let out = perturb_features(&clean(), &m, 200, &s, 5).unwrap();
        let e = noise_tensor((2, 3, 4), 0.0, 1.0, 5);
        let diff = &out.features - &clean().values;
        for (d, e) in diff.iter().zip(e.iter()) {
            assert!((d - 0.1 * e).abs() < 1e-15);
        }
    }

    #[test]
    fn clean_input_not_mutated_and_seed_reproducible() {
        let c = clean();
        let m = mask(Array2::from_shape_fn((2, 3), |(y, x)| (x * y) as f64));
        let a = perturb_features(&c, &m, 100, &sched(), 3).unwrap();
        let b = perturb_features(&c, &m, 100, &sched(), 3).unwrap();
        assert_eq!(c, clean());
        assert_eq!(a, b);
        assert!(perturb_features(&c, &mask(Array2::zeros((3, 3))), 1, &sched(), 1).is_err());
    }

    fn img4() -> Array3<f64> {
        Array3::from_elem((2, 2, 3), 0.5)
    }

    #[test]
    fn image_ratio_extremes_and_top_k() {
        let s = sched();
        let m = mask(array![[0.1, 0.9], [0.4, 0.2]]);
        let none = perturb_image(img4().view(), &m, 0.0, &s, 1).unwrap();
        assert_eq!(none.image, img4());
        let all = perturb_image(img4().view(), &m, 1.0, &s, 1).unwrap();
        assert!(all.selected.iter().all(|&v| v));
        let one = perturb_image(img4().view(), &m, 0.25, &s, 1).unwrap();
        assert_eq!(one.selected, array![[false, true], [false, false]]);
        for y in 0..2 {
            for x in 0..2 {
                if !one.selected[[y, x]] {
                    assert_eq!(one.image[[y, x, 0]], 0.5);
                }
            }
        }
        assert!(perturb_image(img4().view(), &m, 1.5, &s, 1).is_err());
        assert!(all.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ties_break_by_index() {
        let sel = top_k_mask(Array2::from_elem((2, 2), 1.0).view(), 2);
        assert_eq!(sel, array![[true, true], [false, false]]);
    }

    #[test]
    fn random_image_selection_has_exact_count() {
        let img = Array3::from_elem((8, 8, 3), 0.5);
        let out = perturb_image_random(img.view(), 0.6, &sched(), 4).unwrap();
        assert_eq!(out.selected.iter().filter(|&&v| v).count(), 38);
    }
}
