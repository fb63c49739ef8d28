//! Overlap and surface-distance metrics for segmentation masks.
//!
//! Distances are in pixels. Boundaries are the pixels of a class region with
//! at least one 4-neighbour outside the region (pixels beyond the image edge
//! count as outside). HD95 is the linearly interpolated 95th percentile of the
//! pooled nearest-boundary distances in both directions; ASD is their mean.
//! When a class is present in exactly one of the two masks both distances are
//! infinite; when it is absent from both they are zero.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::Mask;
use crate::{Error, Result};

fn check(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.size() != gt.size() {
        return Err(Error::dims(gt.size(), pred.size()));
    }
    Ok(())
}

fn overlap(pred: &Mask, gt: &Mask, class: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut np = 0;
    let mut ng = 0;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (a, b) = (p == class, g == class);
        np += usize::from(a);
        ng += usize::from(b);
        inter += usize::from(a && b);
    }
    (inter, np, ng)
}

/// `2|P∩G| / (|P|+|G|)`, or 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    check(pred, gt)?;
    let (i, p, g) = overlap(pred, gt, class);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`, or 1 when both are empty.
pub fn jaccard(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    check(pred, gt)?;
    let (i, p, g) = overlap(pred, gt, class);
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Boundary pixels of `class` as `(y, x)` pairs.
pub fn boundary(mask: &Mask, class: u8) -> Vec<(usize, usize)> {
    let s = mask.size();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < s && (x as usize) < s && mask.get(y as usize, x as usize) == class
    };
    let mut out = Vec::new();
    for y in 0..s {
        for x in 0..s {
            if mask.get(y, x) != class {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn nearest(from: &[(usize, usize)], to: &[(usize, usize)], out: &mut Vec<f64>) {
    for &(y, x) in from {
        let best = to
            .iter()
            .map(|&(v, u)| {
                let dy = y as f64 - v as f64;
                let dx = x as f64 - u as f64;
                dy * dy + dx * dx
            })
            .fold(f64::INFINITY, f64::min);
        out.push(math::sqrt(best));
    }
}

/// Pooled symmetric nearest-boundary distances. `None` when the class is
/// present in exactly one mask.
pub fn surface_distances(pred: &Mask, gt: &Mask, class: u8) -> Result<Option<Vec<f64>>> {
    check(pred, gt)?;
    let bp = boundary(pred, class);
    let bg = boundary(gt, class);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => Ok(Some(Vec::new())),
        (true, false) | (false, true) => Ok(None),
        (false, false) => {
            let mut d = Vec::with_capacity(bp.len() + bg.len());
            nearest(&bp, &bg, &mut d);
            nearest(&bg, &bp, &mut d);
            Ok(Some(d))
        }
    }
}

/// Linearly interpolated `q`-quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

pub fn hd95(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    Ok(match surface_distances(pred, gt, class)? {
        None => f64::INFINITY,
        Some(mut d) => {
            d.sort_by(f64::total_cmp);
            quantile_sorted(&d, 0.95).unwrap_or(0.0)
        }
    })
}

pub fn asd(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    Ok(match surface_distances(pred, gt, class)? {
        None => f64::INFINITY,
        Some(d) if d.is_empty() => 0.0,
        Some(mut d) => {
            // Summed in sorted order so swapping the masks gives the same bits.
            d.sort_by(f64::total_cmp);
            d.iter().sum::<f64>() / d.len() as f64
        }
    })
}

/// Per-class metrics averaged over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub dice: f64,
    pub jaccard: f64,
    /// Mean over images with a finite distance; `None` if there are none.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Images excluded from the distance means because the class was present
    /// in only one of prediction and ground truth.
    pub infinite_count: usize,
}

/// Foreground-class metrics and their class averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub images: usize,
}

fn mean_finite(values: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
}

/// Evaluates every foreground class `1..num_classes` per image, then averages
/// over images and finally over classes.
pub fn evaluate(preds: &[Mask], gts: &[Mask], num_classes: usize) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::dims(gts.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let n = preds.len() as f64;
    let mut per_class = Vec::new();
    for class in 1..num_classes as u8 {
        let (mut dsum, mut jsum) = (0.0, 0.0);
        let mut hds = Vec::with_capacity(preds.len());
        let mut asds = Vec::with_capacity(preds.len());
        for (p, g) in preds.iter().zip(gts) {
            dsum += dice(p, g, class)?;
            jsum += jaccard(p, g, class)?;
            hds.push(hd95(p, g, class)?);
            asds.push(asd(p, g, class)?);
        }
        per_class.push(ClassMetrics {
            class_id: class,
            dice: dsum / n,
            jaccard: jsum / n,
            hd95: mean_finite(&hds),
            asd: mean_finite(&asds),
            infinite_count: hds.iter().filter(|v| v.is_infinite()).count(),
        });
    }
    let k = per_class.len().max(1) as f64;
    let avg_opt = |f: fn(&ClassMetrics) -> Option<f64>| {
        let v: Vec<f64> = per_class.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(MetricReport {
        dice: per_class.iter().map(|c| c.dice).sum::<f64>() / k,
        jaccard: per_class.iter().map(|c| c.jaccard).sum::<f64>() / k,
        hd95: avg_opt(|c| c.hd95),
        asd: avg_opt(|c| c.asd),
        per_class,
        images: preds.len(),
    })
}
