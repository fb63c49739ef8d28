//! Cross-entropy plus soft Dice over per-pixel class distributions.
//!
//! Both terms are computed per image over the pixels whose weight is non-zero
//! and then averaged over the batch; an image with no weighted pixel
//! contributes zero. With `C` classes the Dice term of one image is
//! `1 − (1/C) Σ_c (2 I_c + ε) / (S_c + G_c + ε)` where `I_c` is the weighted
//! overlap of predicted probability and label, `S_c` the weighted predicted
//! mass and `G_c` the weighted label count.

use alloc::vec;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Smoothing added to the numerator and denominator of each soft Dice ratio.
pub const DICE_SMOOTHING: f64 = 1e-5;

/// Probabilities below this are clamped inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Batch-mean cross-entropy and Dice loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLossParts {
    pub cross_entropy: f64,
    pub dice: f64,
}

impl SegLossParts {
    pub fn total(&self, eta: f64) -> f64 {
        self.cross_entropy + eta * self.dice
    }
}

pub(crate) fn check_inputs(probs: &Tensor, labels: &[u8], weights: &[f64]) -> Result<()> {
    let [n, c, h, w] = probs.shape();
    if labels.len() != n * h * w {
        return Err(Error::dims(n * h * w, labels.len()));
    }
    if weights.len() != labels.len() {
        return Err(Error::dims(labels.len(), weights.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::field("mask", alloc::format!("class id {bad} >= {c}")));
    }
    Ok(())
}

struct ImageStats {
    active: f64,
    ce_sum: f64,
    inter: alloc::vec::Vec<f64>,
    pred: alloc::vec::Vec<f64>,
    truth: alloc::vec::Vec<f64>,
}

fn image_stats(probs: &Tensor, labels: &[u8], weights: &[f64], b: usize) -> ImageStats {
    let [_, c, h, w] = probs.shape();
    let plane = h * w;
    let p = probs.item(b);
    let lab = &labels[b * plane..][..plane];
    let wt = &weights[b * plane..][..plane];
    let mut st = ImageStats {
        active: 0.0,
        ce_sum: 0.0,
        inter: vec![0.0; c],
        pred: vec![0.0; c],
        truth: vec![0.0; c],
    };
    for i in 0..plane {
        let m = wt[i];
        if m == 0.0 {
            continue;
        }
        let y = lab[i] as usize;
        st.active += m;
        st.ce_sum -= m * math::ln(p[y * plane + i].max(PROB_FLOOR));
        st.inter[y] += m * p[y * plane + i];
        st.truth[y] += m;
        for ch in 0..c {
            st.pred[ch] += m * p[ch * plane + i];
        }
    }
    st
}

/// Loss components restricted to pixels with non-zero `weights`.
pub fn masked_seg_loss(probs: &Tensor, labels: &[u8], weights: &[f64]) -> Result<SegLossParts> {
    check_inputs(probs, labels, weights)?;
    let [n, c, _, _] = probs.shape();
    let mut out = SegLossParts {
        cross_entropy: 0.0,
        dice: 0.0,
    };
    for b in 0..n {
        let st = image_stats(probs, labels, weights, b);
        if st.active == 0.0 {
            continue;
        }
        out.cross_entropy += st.ce_sum / st.active;
        let mean_dice = (0..c)
            .map(|ch| {
                (2.0 * st.inter[ch] + DICE_SMOOTHING)
                    / (st.pred[ch] + st.truth[ch] + DICE_SMOOTHING)
            })
            .sum::<f64>()
            / c as f64;
        out.dice += 1.0 - mean_dice;
    }
    out.cross_entropy /= n as f64;
    out.dice /= n as f64;
    Ok(out)
}

/// Adds `upstream · ∂(ce + η·dice)/∂probs` into `gp`.
pub(crate) fn masked_seg_loss_grad(
    probs: &Tensor,
    labels: &[u8],
    weights: &[f64],
    eta: f64,
    upstream: f64,
    gp: &mut [f64],
) {
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let scale = upstream / n as f64;
    for b in 0..n {
        let st = image_stats(probs, labels, weights, b);
        if st.active == 0.0 {
            continue;
        }
        let p = probs.item(b);
        let g = &mut gp[b * c * plane..][..c * plane];
        let lab = &labels[b * plane..][..plane];
        let wt = &weights[b * plane..][..plane];
        // d(1 - mean_c ratio_c)/dp[c,i] = -(1/C) m_i (2[y_i = c] D_c - N_c) / D_c²
        let coef: alloc::vec::Vec<(f64, f64)> = (0..c)
            .map(|ch| {
                let num = 2.0 * st.inter[ch] + DICE_SMOOTHING;
                let den = st.pred[ch] + st.truth[ch] + DICE_SMOOTHING;
                (2.0 / den, num / (den * den))
            })
            .collect();
        let dice_scale = -eta * scale / c as f64;
        let ce_scale = scale / st.active;
        for i in 0..plane {
            let m = wt[i];
            if m == 0.0 {
                continue;
            }
            let y = lab[i] as usize;
            for (ch, &(a, bq)) in coef.iter().enumerate() {
                let hit = if ch == y { a } else { 0.0 };
                g[ch * plane + i] += dice_scale * m * (hit - bq);
            }
            let py = p[y * plane + i];
            if py > PROB_FLOOR {
                g[y * plane + i] -= ce_scale * m / py;
            }
        }
    }
}

/// Cross-entropy plus `eta` times soft Dice over every pixel.
///
/// `labels` holds one class id per pixel in `[batch, h, w]` order.
pub fn supervised_loss(probs: &Tensor, labels: &[u8], eta: f64) -> Result<f64> {
    let weights = vec![1.0; labels.len()];
    Ok(masked_seg_loss(probs, labels, &weights)?.total(eta))
}

/// Mean squared difference over every element: the batch mean of each item's
/// squared L2 distance divided by the item's element count.
pub fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(labels: &[u8], c: usize, size: usize) -> Tensor {
        let plane = size * size;
        let n = labels.len() / plane;
        let mut t = Tensor::zeros([n, c, size, size]);
        for (i, &l) in labels.iter().enumerate() {
            let (b, p) = (i / plane, i % plane);
            t.data_mut()[(b * c + l as usize) * plane + p] = 1.0;
        }
        t
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let labels = [0u8, 1, 2, 1];
        let probs = one_hot(&labels, 3, 2);
        let parts = masked_seg_loss(&probs, &labels, &[1.0; 4]).unwrap();
        assert!(parts.cross_entropy.abs() < 1e-12);
        assert!(parts.dice.abs() < 1e-5);
    }

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let probs = Tensor::from_vec([1, 2, 2, 2], vec![0.5; 8]).unwrap();
        let parts = masked_seg_loss(&probs, &[0, 1, 1, 0], &[1.0; 4]).unwrap();
        assert!((parts.cross_entropy - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn straight_line_two_by_two() {
        // Every pixel is class 0 and gets probability 0.9.
        let probs = Tensor::from_vec([1, 2, 2, 2], vec![0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1]).unwrap();
        let ce = -(0.9f64).ln();
        let eps = 1e-5;
        let d0 = (2.0 * 3.6 + eps) / (3.6 + 4.0 + eps);
        let d1 = (0.0 + eps) / (0.4 + 0.0 + eps);
        let expected = ce + 1.0 * (1.0 - (d0 + d1) / 2.0);
        let got = supervised_loss(&probs, &[0; 4], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn empty_weights_give_zero() {
        let probs = Tensor::from_vec([1, 2, 1, 2], vec![0.3, 0.6, 0.7, 0.4]).unwrap();
        let parts = masked_seg_loss(&probs, &[1, 0], &[0.0, 0.0]).unwrap();
        assert_eq!(parts.total(1.0), 0.0);
    }

    #[test]
    fn bad_class_id_rejected() {
        let probs = Tensor::from_vec([1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert!(supervised_loss(&probs, &[2], 1.0).is_err());
    }
}
