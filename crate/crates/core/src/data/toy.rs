//! Procedural texture dataset with injected defects and exact masks.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{imageops, DatasetManifest, Label, SampleRef, Source, Split};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Parameters of the toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub n_categories: usize,
    pub n_train_per_cat: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Patch size of the downstream encoder; `image_size` must be a multiple.
    pub patch_size: usize,
    /// Minimum |mean gray inside defect − mean gray outside|.
    pub min_contrast: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_categories: 2,
            n_train_per_cat: 50,
            n_test_normal: 10,
            n_test_anomalous: 10,
            image_size: 64,
            seed: 7,
            patch_size: 8,
            min_contrast: 0.15,
        }
    }
}

pub const MIN_DEFECT_FRACTION: f64 = 0.01;
pub const MAX_DEFECT_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Stripes,
    Checker,
    Blobs,
}

const FAMILIES: [Family; 3] = [Family::Stripes, Family::Checker, Family::Blobs];

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Checker => "checker",
            Family::Blobs => "blobs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Patch,
    Scratch,
    Deform,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Patch => "patch",
            DefectKind::Scratch => "scratch",
            DefectKind::Deform => "deform",
        }
    }
}

/// Category-level appearance.
#[derive(Debug, Clone)]
struct Palette {
    family: Family,
    dark: [f64; 3],
    light: [f64; 3],
    scale: f64,
}

/// One image's texture instance.
#[derive(Debug, Clone)]
struct Texture {
    palette: Palette,
    angle: f64,
    phase_x: f64,
    phase_y: f64,
    blobs: Vec<(f64, f64, f64)>,
    brightness: f64,
}

impl Texture {
    fn new(palette: &Palette, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = size as f64;
        let blobs = if palette.family == Family::Blobs {
            let count = rng.random_range(6..=10);
            (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.0..n),
                        rng.random_range(0.0..n),
                        palette.scale * rng.random_range(0.8..1.2),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let angle_jitter = match palette.family {
            Family::Stripes => 0.15,
            _ => 0.05,
        };
        Self {
            palette: palette.clone(),
            angle: rng.random_range(-angle_jitter..angle_jitter),
            phase_x: rng.random_range(0.0..palette.scale * 2.0),
            phase_y: rng.random_range(0.0..palette.scale * 2.0),
            blobs,
            brightness: rng.random_range(-0.03..0.03),
        }
    }

    /// Mixing weight between the dark and light colour at a point.
    fn weight(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let u = c * x + s * y;
        let v = -s * x + c * y;
        match self.palette.family {
            Family::Stripes => {
                0.5 + 0.5 * (2.0 * PI * (u + self.phase_x) / self.palette.scale).sin()
            }
            Family::Checker => {
                let i = ((u + self.phase_x) / self.palette.scale).floor() as i64;
                let j = ((v + self.phase_y) / self.palette.scale).floor() as i64;
                if (i + j).rem_euclid(2) == 0 {
                    0.1
                } else {
                    0.9
                }
            }
            Family::Blobs => {
                let t: f64 = self
                    .blobs
                    .iter()
                    .map(|&(bx, by, sg)| {
                        let d2 = (x - bx).powi(2) + (y - by).powi(2);
                        (-d2 / (2.0 * sg * sg)).exp()
                    })
                    .sum();
                t.min(1.0)
            }
        }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let t = self.weight(x, y);
        let p = &self.palette;
        [0, 1, 2].map(|c| p.dark[c] * (1.0 - t) + p.light[c] * t + self.brightness)
    }

    fn render(&self, size: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        let grain = Normal::new(0.0, 0.015).unwrap();
        let mut img = Array3::<f64>::zeros((size, size, 3));
        for y in 0..size {
            for x in 0..size {
                let col = self.color(x as f64, y as f64);
                for c in 0..3 {
                    img[[y, x, c]] = (col[c] + grain.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}

fn palette_for(category: usize, size: usize, rng: &mut ChaCha8Rng) -> Palette {
    let family = FAMILIES[category % FAMILIES.len()];
    let tint = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let base = rng.random_range(lo..hi);
        [0, 1, 2].map(|_| (base + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0))
    };
    let dark = tint(rng, 0.2, 0.32);
    let light = tint(rng, 0.62, 0.74);
    let unit = size as f64 / 64.0;
    let scale = unit
        * match family {
            Family::Stripes => rng.random_range(9.0..13.0),
            Family::Checker => rng.random_range(7.0..10.0),
            Family::Blobs => rng.random_range(4.0..6.0),
        };
    Palette {
        family,
        dark,
        light,
        scale,
    }
}

fn gray(px: &Array3<f64>, y: usize, x: usize) -> f64 {
    (px[[y, x, 0]] + px[[y, x, 1]] + px[[y, x, 2]]) / 3.0
}

fn contrast_color(region_mean: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if region_mean < 0.5 {
        [0, 1, 2].map(|_| rng.random_range(0.88..0.98))
    } else {
        [0, 1, 2].map(|_| rng.random_range(0.02..0.12))
    }
}

fn region_mean(px: &Array3<f64>, mask: &Array2<bool>) -> f64 {
    imageops::mean_gray(px.view(), mask.view(), true)
}

/// Inject one defect of `kind`; returns the exact mask.
fn inject(
    px: &mut Array3<f64>,
    tex: &Texture,
    kind: DefectKind,
    rng: &mut ChaCha8Rng,
) -> Array2<bool> {
    let size = px.dim().0;
    let n = size as f64;
    let area = n * n;
    let mut mask = Array2::from_elem((size, size), false);
    match kind {
        DefectKind::Patch => {
            let frac = rng.random_range(0.02..0.08);
            let aspect = rng.random_range(0.6..1.6);
            let w = ((frac * area * aspect).sqrt().round() as usize).clamp(2, size - 2);
            let h = ((frac * area / w as f64).round() as usize).clamp(2, size - 2);
            let x0 = rng.random_range(1..size - w);
            let y0 = rng.random_range(1..size - h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    mask[[y, x]] = true;
                }
            }
            let col = contrast_color(region_mean(px, &mask), rng);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    for c in 0..3 {
                        px[[y, x, c]] = (col[c] + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let width = rng.random_range(2.0..3.5) * n / 64.0;
            let len = rng.random_range(0.35..0.6) * n;
            let theta = rng.random_range(0.0..PI);
            let cx = rng.random_range(0.3 * n..0.7 * n);
            let cy = rng.random_range(0.3 * n..0.7 * n);
            let (s, c) = theta.sin_cos();
            let (ax, ay) = (cx - c * len / 2.0, cy - s * len / 2.0);
            for y in 0..size {
                for x in 0..size {
                    let (px_, py_) = (x as f64 - ax, y as f64 - ay);
                    let t = (px_ * c + py_ * s).clamp(0.0, len);
                    let dx = px_ - c * t;
                    let dy = py_ - s * t;
                    if (dx * dx + dy * dy).sqrt() <= width / 2.0 {
                        mask[[y, x]] = true;
                    }
                }
            }
            let col = contrast_color(region_mean(px, &mask), rng);
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    for ch in 0..3 {
                        px[[y, x, ch]] = col[ch];
                    }
                }
            }
        }
        DefectKind::Deform => {
            let frac = rng.random_range(0.02..0.08);
            let r = (frac * area / PI).sqrt();
            let cx = rng.random_range(r + 1.0..n - r - 1.0);
            let cy = rng.random_range(r + 1.0..n - r - 1.0);
            let twist = rng.random_range(2.0..3.5);
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    if d <= r {
                        mask[[y, x]] = true;
                    }
                }
            }
            let shift = if region_mean(px, &mask) < 0.5 { 0.35 } else { -0.35 };
            for ((y, x), &m) in mask.indexed_iter() {
                if !m {
                    continue;
                }
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let d = (dx * dx + dy * dy).sqrt();
                let a = twist * (1.0 - d / r);
                let (s, c) = a.sin_cos();
                let col = tex.color(cx + c * dx - s * dy, cy + s * dx + c * dy);
                for ch in 0..3 {
                    px[[y, x, ch]] = (col[ch] + shift).clamp(0.0, 1.0);
                }
            }
        }
    }
    mask
}

fn contrast(px: &Array3<f64>, mask: &Array2<bool>) -> f64 {
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            inside += gray(px, y, x);
            n_in += 1;
        } else {
            outside += gray(px, y, x);
            n_out += 1;
        }
    }
    (inside / n_in.max(1) as f64 - outside / n_out.max(1) as f64).abs()
}

/// Generate the toy dataset fully in memory.
///
/// Category `i` uses texture family `i mod 3` (stripes, checker, blobs) with
/// its own palette; every image gets fresh phase/orientation/blob jitter.
/// Anomalous test images carry one defect (patch, scratch or swirl
/// deformation, equiprobable) covering 1–15% of the pixels.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<DatasetManifest> {
    if spec.patch_size == 0 || spec.image_size % spec.patch_size != 0 {
        return Err(Error::config(format!(
            "image_size {} is not divisible by patch_size {}",
            spec.image_size, spec.patch_size
        )));
    }
    if spec.image_size < 16 {
        return Err(Error::config("toy image_size must be at least 16"));
    }
    let size = spec.image_size;
    let mut samples = Vec::new();
    let mut categories = Vec::new();
    for cat in 0..spec.n_categories {
        let round = cat / FAMILIES.len();
        let family = FAMILIES[cat % FAMILIES.len()];
        let name = if round == 0 {
            family.name().to_string()
        } else {
            format!("{}-{round}", family.name())
        };
        categories.push(name.clone());
        let mut cat_rng = rng_for(spec.seed, Stream::Toy, &[cat as u64, u64::MAX]);
        let palette = palette_for(cat, size, &mut cat_rng);

        let mut push = |split: Split, idx: usize, kind: Option<DefectKind>| -> Result<()> {
            let split_tag = match (split, kind) {
                (Split::Train, _) => 0u64,
                (Split::Test, None) => 1,
                (Split::Test, Some(_)) => 2,
            };
            let mut rng = rng_for(spec.seed, Stream::Toy, &[cat as u64, split_tag, idx as u64]);
            let tex = Texture::new(&palette, size, &mut rng);
            let clean = tex.render(size, &mut rng);
            let (pixels, mask, defect) = match kind {
                None => (clean, None, "good".to_string()),
                Some(kind) => {
                    let mut attempt = 0;
                    loop {
                        let mut px = clean.clone();
                        let m = inject(&mut px, &tex, kind, &mut rng);
                        let frac = m.iter().filter(|&&v| v).count() as f64 / (size * size) as f64;
                        let ok = (MIN_DEFECT_FRACTION..=MAX_DEFECT_FRACTION).contains(&frac)
                            && contrast(&px, &m) >= spec.min_contrast;
                        if ok {
                            break (px, Some(m), kind.name().to_string());
                        }
                        attempt += 1;
                        if attempt > 200 {
                            return Err(Error::config(format!(
                                "could not place a {} defect meeting min_contrast {}",
                                kind.name(),
                                spec.min_contrast
                            )));
                        }
                    }
                }
            };
            let id = match split {
                Split::Train => format!("{name}/train/good/{idx:03}"),
                Split::Test => format!("{name}/test/{defect}/{idx:03}"),
            };
            samples.push(SampleRef {
                id,
                category: name.clone(),
                split,
                label: if kind.is_some() {
                    Label::Anomalous
                } else {
                    Label::Normal
                },
                defect_type: defect,
                source: Source::Memory {
                    pixels: Arc::new(pixels),
                    mask: mask.map(Arc::new),
                },
            });
            Ok(())
        };

        for i in 0..spec.n_train_per_cat {
            push(Split::Train, i, None)?;
        }
        for i in 0..spec.n_test_normal {
            push(Split::Test, i, None)?;
        }
        let kinds = [DefectKind::Patch, DefectKind::Scratch, DefectKind::Deform];
        for i in 0..spec.n_test_anomalous {
            let mut krng = rng_for(spec.seed, Stream::Toy, &[cat as u64, 3, i as u64]);
            let kind = kinds[krng.random_range(0..kinds.len())];
            push(Split::Test, i, Some(kind))?;
        }
    }
    Ok(DatasetManifest {
        samples,
        categories,
        seed: spec.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_spec() {
        let spec = ToySpec {
            n_train_per_cat: 50,
            ..ToySpec::default()
        };
        let m = generate_toy_dataset(&spec).unwrap();
        assert_eq!(m.train().count(), 100);
        assert_eq!(m.test().count(), 40);
        assert_eq!(m.mask_count(), 20);
        assert_eq!(m.categories, vec!["stripes", "checker"]);
    }

    #[test]
    fn non_divisible_size_is_config_error() {
        let spec = ToySpec {
            image_size: 60,
            ..ToySpec::default()
        };
        assert!(matches!(generate_toy_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = ToySpec {
            n_train_per_cat: 3,
            n_test_normal: 2,
            n_test_anomalous: 3,
            ..ToySpec::default()
        };
        let a = generate_toy_dataset(&spec).unwrap();
        let b = generate_toy_dataset(&spec).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            let (x, y) = (x.load().unwrap(), y.load().unwrap());
            let xb: Vec<u64> = x.pixels.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.pixels.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
            assert_eq!(x.gt_mask, y.gt_mask);
        }
    }

    #[test]
    fn every_anomalous_image_is_separable() {
        let spec = ToySpec {
            n_categories: 3,
            n_train_per_cat: 0,
            n_test_normal: 0,
            n_test_anomalous: 30,
            ..ToySpec::default()
        };
        let m = generate_toy_dataset(&spec).unwrap();
        for s in m.test() {
            let s = s.load().unwrap();
            let mask = s.gt_mask.as_ref().unwrap();
            assert!(contrast(&s.pixels, mask) >= spec.min_contrast, "{}", s.id);
        }
    }
}
