//! Pixel-level helpers: decode/encode, bilinear and nearest resampling,
//! small-angle rotation with reflect padding and the dihedral group.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Decode an 8-bit image into an `H × W × 3` array in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Decode a mask; any nonzero luma is anomalous.
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 0
    }))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, pixels: ArrayView3<f64>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize(pixels[[y, x, 0]]),
            quantize(pixels[[y, x, 1]]),
            quantize(pixels[[y, x, 2]]),
        ])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: ArrayView2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a map already scaled to `[0, 1]` as 8-bit grayscale.
pub fn write_gray(path: &Path, values: ArrayView2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(values[[y as usize, x as usize]])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[inline]
fn source_coord(dst: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
/// Resizing to the same shape is the identity.
pub fn resize_bilinear(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, sx, w)).collect();
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, sy, h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[y, x]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

pub fn resize_bilinear_rgb(src: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((out_h, out_w, 3));
    for c in 0..3 {
        let ch = resize_bilinear(src.index_axis(ndarray::Axis(2), c), out_h, out_w);
        out.index_axis_mut(ndarray::Axis(2), c).assign(&ch);
    }
    out
}

pub fn resize_nearest_mask(src: ArrayView2<bool>, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
        src[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

/// Mirror an out-of-range coordinate back into `[0, len - 1]`
/// without repeating the edge sample.
fn reflect(mut v: f64, len: usize) -> f64 {
    if len == 1 {
        return 0.0;
    }
    let max = (len - 1) as f64;
    let period = 2.0 * max;
    v = v.rem_euclid(period);
    if v > max {
        period - v
    } else {
        v
    }
}

/// Rotate about the image center by `degrees`, bilinear, reflect padding.
pub fn rotate_reflect(src: ArrayView3<f64>, degrees: f64) -> Array3<f64> {
    if degrees == 0.0 {
        return src.to_owned();
    }
    let (h, w, c) = src.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // inverse rotation maps output to input coordinates
            let sx = reflect(cos * dx + sin * dy + cx, w);
            let sy = reflect(-sin * dx + cos * dy + cy, h);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - fx) + src[[y0, x1, ch]] * fx;
                let bot = src[[y1, x0, ch]] * (1.0 - fx) + src[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Element `index` of the dihedral group of the square: rotate by
/// `90° · (index % 4)` then mirror horizontally when `index >= 4`.
pub fn dihedral(src: ArrayView3<f64>, index: u8) -> Array3<f64> {
    let (h, w, c) = src.dim();
    assert_eq!(h, w, "dihedral transforms need square images");
    let n = h;
    let rot = index % 4;
    let flip = index >= 4;
    Array3::from_shape_fn((n, n, c), |(y, x, ch)| {
        let x = if flip { n - 1 - x } else { x };
        let (sy, sx) = match rot {
            0 => (y, x),
            1 => (n - 1 - x, y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (x, n - 1 - y),
        };
        src[[sy, sx, ch]]
    })
}

pub fn mean_gray(pixels: ArrayView3<f64>, mask: ArrayView2<bool>, inside: bool) -> f64 {
    let (h, w, _) = pixels.dim();
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == inside {
                acc += (pixels[[y, x, 0]] + pixels[[y, x, 1]] + pixels[[y, x, 2]]) / 3.0;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}
