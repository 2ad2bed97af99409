//! Static PNG charts for run reports: loss curves, score histograms and
//! ablation bar charts. Plain raster drawing, no text.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 30;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// Series colours, cycled.
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

struct Canvas {
    img: RgbImage,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Canvas {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
        for k in 1..5 {
            let y = MARGIN + k * (HEIGHT - 2 * MARGIN) / 5;
            for x in MARGIN..WIDTH - MARGIN {
                img.put_pixel(x, y, GRID);
            }
        }
        for x in MARGIN..WIDTH - MARGIN {
            img.put_pixel(x, HEIGHT - MARGIN, AXIS);
        }
        for y in MARGIN..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, y, AXIS);
        }
        let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { img, x0, x1, y0, y1 }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = (WIDTH - 2 * MARGIN) as f64;
        let h = (HEIGHT - 2 * MARGIN) as f64;
        (
            MARGIN as f64 + (x - self.x0) / (self.x1 - self.x0) * w,
            (HEIGHT - MARGIN) as f64 - (y - self.y0) / (self.y1 - self.y0) * h,
        )
    }

    fn dot(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (pa, pb) = (self.px(a.0, a.1), self.px(b.0, b.1));
        let steps = ((pb.0 - pa.0).abs().max((pb.1 - pa.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (pa.0 + t * (pb.0 - pa.0)).round() as i64;
            let y = (pa.1 + t * (pb.1 - pa.1)).round() as i64;
            self.dot(x, y, c);
            self.dot(x, y + 1, c);
        }
    }

    fn rect(&mut self, xa: f64, xb: f64, ya: f64, yb: f64, c: Rgb<u8>) {
        let (pa, pb) = (self.px(xa, ya), self.px(xb, yb));
        let (x0, x1) = (pa.0.min(pb.0).round() as i64, pa.0.max(pb.0).round() as i64);
        let (y0, y1) = (pa.1.min(pb.1).round() as i64, pa.1.max(pb.1).round() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.dot(x, y, c);
            }
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|source| crate::Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Line chart of several series sharing the x axis (index).
pub fn line_chart(path: &Path, series: &[&[f64]]) -> Result<()> {
    let n = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let (lo, hi) = range(series.iter().flat_map(|s| s.iter().copied()));
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi) } else { (0.0, 1.0) };
    let mut c = Canvas::new(0.0, n.saturating_sub(1) as f64, lo, hi);
    for (k, s) in series.iter().enumerate() {
        for (i, w) in s.windows(2).enumerate() {
            if w[0].is_finite() && w[1].is_finite() {
                c.line((i as f64, w[0]), ((i + 1) as f64, w[1]), PALETTE[k % PALETTE.len()]);
            }
        }
    }
    c.save(path)
}

/// Overlaid histograms (one colour per group) over a shared bin range.
pub fn histogram(path: &Path, groups: &[&[f64]], bins: usize) -> Result<()> {
    let bins = bins.max(1);
    let (lo, hi) = range(groups.iter().flat_map(|g| g.iter().copied()));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            let mut c = vec![0usize; bins];
            for &v in g.iter().filter(|v| v.is_finite()) {
                c[(((v - lo) / width) as usize).min(bins - 1)] += 1;
            }
            c
        })
        .collect();
    let top = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let mut c = Canvas::new(lo, hi, 0.0, top);
    let slot = width / groups.len().max(1) as f64;
    for (k, cs) in counts.iter().enumerate() {
        for (b, &n) in cs.iter().enumerate() {
            if n > 0 {
                let x = lo + b as f64 * width + k as f64 * slot;
                c.rect(x, x + slot * 0.9, 0.0, n as f64, PALETTE[k % PALETTE.len()]);
            }
        }
    }
    c.save(path)
}

/// Grouped bar chart: one group per row, one bar per value in the row.
pub fn bar_chart(path: &Path, rows: &[Vec<f64>], y_min: f64, y_max: f64) -> Result<()> {
    let groups = rows.len().max(1);
    let per = rows.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let mut c = Canvas::new(0.0, groups as f64, y_min, y_max);
    let slot = 0.8 / per as f64;
    for (g, row) in rows.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let x = g as f64 + 0.1 + k as f64 * slot;
            c.rect(x, x + slot * 0.9, y_min, v.clamp(y_min, y_max), PALETTE[k % PALETTE.len()]);
        }
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_write_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let a = [3.0, 2.0, 1.5, 1.0];
        line_chart(&dir.path().join("l.png"), &[&a, &[1.0, f64::NAN]]).unwrap();
        histogram(&dir.path().join("h.png"), &[&a, &[0.5]], 10).unwrap();
        bar_chart(&dir.path().join("b.png"), &[vec![0.5, 0.9], vec![0.7, 1.0]], 0.0, 1.0).unwrap();
        histogram(&dir.path().join("e.png"), &[], 4).unwrap();
        let img = image::open(dir.path().join("b.png")).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
    }
}
