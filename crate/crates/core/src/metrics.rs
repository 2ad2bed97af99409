//! Evaluation metrics: image-level AUROC, pixel-level AUROC and the
//! per-region-overlap (PRO) curve integrated up to a false-positive limit.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper false-positive-rate bound for PRO integration.
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Inputs with at most this many pixels use every distinct score as a
/// threshold; larger inputs use [`QUANTILE_THRESHOLDS`] quantiles.
pub const EXACT_SWEEP_MAX_PIXELS: usize = 65_536;
pub const QUANTILE_THRESHOLDS: usize = 512;

/// Mann–Whitney AUROC: probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives (ranks are 1-based)
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * pos_in_tie as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUROC over the pooled pixel population. `None` masks mean all-normal.
pub fn pixel_auroc(maps: &[ArrayView2<f64>], masks: &[Option<ArrayView2<bool>>]) -> Result<f64> {
    let (scores, labels) = pool_pixels(maps, masks)?;
    auroc(&scores, &labels)
}

fn pool_pixels(
    maps: &[ArrayView2<f64>],
    masks: &[Option<ArrayView2<bool>>],
) -> Result<(Vec<f64>, Vec<bool>)> {
    if maps.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let total: usize = maps.iter().map(|m| m.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (m, g) in maps.iter().zip(masks) {
        if let Some(g) = g {
            if g.dim() != m.dim() {
                return Err(Error::shape(format!(
                    "mask {:?} vs map {:?}",
                    g.dim(),
                    m.dim()
                )));
            }
        }
        for (idx, &s) in m.indexed_iter() {
            scores.push(s);
            labels.push(g.as_ref().is_some_and(|g| g[idx]));
        }
    }
    Ok((scores, labels))
}

/// 8-connected component labelling. Background is 0, components are
/// numbered from 1; returns the label image and the component count.
pub fn connected_components(mask: ArrayView2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = cy as i64 + dy;
                        let nx = cx as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// One point of the PRO curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// Number of elements of ascending `sorted` that are `>= t`.
fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < t)
}

/// PRO curve at descending thresholds (ascending FPR).
pub fn pro_curve(
    maps: &[ArrayView2<f64>],
    masks: &[Option<ArrayView2<bool>>],
) -> Result<Vec<ProPoint>> {
    let (scores, labels) = pool_pixels(maps, masks)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut regions: Vec<Vec<f64>> = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        let Some(g) = g else { continue };
        let (lab, count) = connected_components(g.view());
        let base = regions.len();
        regions.resize(base + count, Vec::new());
        for (idx, &l) in lab.indexed_iter() {
            if l > 0 {
                regions[base + l as usize - 1].push(m[idx]);
            }
        }
    }
    if regions.is_empty() {
        return Err(Error::UndefinedMetric(
            "PRO needs at least one anomalous region".into(),
        ));
    }
    let mut negatives: Vec<f64> = scores
        .iter()
        .zip(&labels)
        .filter_map(|(&s, &l)| (!l).then_some(s))
        .collect();
    if negatives.is_empty() {
        return Err(Error::UndefinedMetric("PRO needs normal pixels".into()));
    }
    negatives.sort_by(f64::total_cmp);
    for r in regions.iter_mut() {
        r.sort_by(f64::total_cmp);
    }

    let mut all = scores;
    all.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = if all.len() <= EXACT_SWEEP_MAX_PIXELS {
        all.clone()
    } else {
        (0..QUANTILE_THRESHOLDS)
            .map(|i| {
                let q = i as f64 / (QUANTILE_THRESHOLDS - 1) as f64;
                all[((all.len() - 1) as f64 * q).round() as usize]
            })
            .collect()
    };
    thresholds.dedup();
    thresholds.reverse();

    let n_neg = negatives.len() as f64;
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let fpr = count_at_least(&negatives, t) as f64 / n_neg;
            let pro = regions
                .iter()
                .map(|r| count_at_least(r, t) as f64 / r.len() as f64)
                .sum::<f64>()
                / regions.len() as f64;
            ProPoint {
                threshold: t,
                fpr,
                pro,
            }
        })
        .collect())
}

/// Trapezoidal area under `(fpr, value)` points from 0 to `limit`,
/// starting from the origin, divided by `limit`.
pub fn normalized_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for &(x, y) in points {
        if x >= limit {
            if x > px {
                let y_at = py + (y - py) * (limit - px) / (x - px);
                area += (limit - px) * (py + y_at) / 2.0;
            }
            return area / limit;
        }
        area += (x - px) * (py + y) / 2.0;
        px = x;
        py = y;
    }
    area += (limit - px) * py;
    area / limit
}

/// Per-region overlap integrated over FPR ∈ [0, `fpr_limit`], normalized.
pub fn pro(
    maps: &[ArrayView2<f64>],
    masks: &[Option<ArrayView2<bool>>],
    fpr_limit: f64,
) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::config(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    let curve = pro_curve(maps, masks)?;
    let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.fpr, p.pro)).collect();
    Ok(normalized_area(&pts, fpr_limit))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub i_auc: f64,
    pub p_auc: f64,
    pub pro: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_category: BTreeMap<String, CategoryMetrics>,
    /// Unweighted average over categories.
    pub mean: CategoryMetrics,
}

/// Scores and annotations of one test image, as consumed by [`evaluate`].
pub struct EvalItem<'a> {
    pub category: &'a str,
    pub anomalous: bool,
    pub image_score: f64,
    pub pixel_scores: ArrayView2<'a, f64>,
    pub gt_mask: Option<ArrayView2<'a, bool>>,
}

/// Compute all three metrics per category and their unweighted mean.
pub fn evaluate(items: &[EvalItem<'_>], fpr_limit: f64) -> Result<EvalResult> {
    let mut cats: BTreeMap<&str, Vec<&EvalItem>> = BTreeMap::new();
    for it in items {
        cats.entry(it.category).or_default().push(it);
    }
    let mut out = EvalResult::default();
    for (cat, its) in cats {
        let scores: Vec<f64> = its.iter().map(|i| i.image_score).collect();
        let labels: Vec<bool> = its.iter().map(|i| i.anomalous).collect();
        let maps: Vec<ArrayView2<f64>> = its.iter().map(|i| i.pixel_scores).collect();
        let masks: Vec<Option<ArrayView2<bool>>> = its.iter().map(|i| i.gt_mask).collect();
        let m = CategoryMetrics {
            i_auc: auroc(&scores, &labels)?,
            p_auc: pixel_auroc(&maps, &masks)?,
            pro: pro(&maps, &masks, fpr_limit)?,
        };
        out.per_category.insert(cat.to_string(), m);
    }
    let n = out.per_category.len().max(1) as f64;
    for m in out.per_category.values() {
        out.mean.i_auc += m.i_auc / n;
        out.mean.p_auc += m.p_auc / n;
        out.mean.pro += m.pro / n;
    }
    Ok(out)
}

impl EvalResult {
    /// Text table with one `I-AUC / P-AUC / PRO (%)` row per category.
    pub fn to_table(&self) -> String {
        let width = self
            .per_category
            .keys()
            .map(|k| k.len())
            .max()
            .unwrap_or(0)
            .max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$} | I-AUC / P-AUC / PRO (%)", "Category");
        let _ = writeln!(s, "{}-+-{}", "-".repeat(width), "-".repeat(23));
        let row = |s: &mut String, name: &str, m: &CategoryMetrics| {
            let _ = writeln!(
                s,
                "{:<width$} | {:.1} / {:.1} / {:.1}",
                name,
                m.i_auc * 100.0,
                m.p_auc * 100.0,
                m.pro * 100.0
            );
        };
        for (k, m) in &self.per_category {
            row(&mut s, k, m);
        }
        row(&mut s, "Mean", &self.mean);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["category", "i_auc", "p_auc", "pro"])?;
        for (k, m) in self
            .per_category
            .iter()
            .chain(std::iter::once((&"mean".to_string(), &self.mean)))
        {
            w.write_record([
                k.clone(),
                format!("{:.6}", m.i_auc),
                format!("{:.6}", m.p_auc),
                format!("{:.6}", m.pro),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
