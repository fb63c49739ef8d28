//! Generalization-aware aggregation.
//!
//! After local training each client reports one scalar: the mean per-pixel KL
//! divergence between the round's global model and its own updated model on
//! its local images. The server moves aggregation weight toward clients with
//! above-average gaps,
//!
//! ```text
//! a'_k = (G_k − μ) · d_r / max_j (G_j − μ) + a_k      d_r = (1 − r/R) · d
//! a_k  = max(a'_k, ε_w) / Σ_j max(a'_j, ε_w)
//! ```
//!
//! and averages the client models with the new weights. When all gaps are
//! equal the deviation term is undefined and the weights are left unchanged.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::segnet::{predict, Architecture, ModelParams};
use crate::tensor::{Image, Tensor};
use crate::{Error, Result};

/// Added inside both logarithms of the KL divergence.
pub const KL_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    pub weights: Vec<f64>,
    /// Number of completed weight updates.
    pub round: usize,
    pub total_rounds: usize,
    /// Base step `d`.
    pub base_step: f64,
    /// Floor applied to raw weights before renormalization.
    pub min_weight: f64,
}

impl AggregationState {
    /// Uniform weights `1/K`.
    pub fn new(clients: usize, total_rounds: usize, base_step: f64, min_weight: f64) -> Result<Self> {
        if clients == 0 {
            return Err(Error::Empty("aggregation needs at least one client"));
        }
        if !(base_step > 0.0 && base_step.is_finite()) {
            return Err(Error::field("d", "must be finite and > 0"));
        }
        if !(min_weight > 0.0 && min_weight * clients as f64 <= 1.0) {
            return Err(Error::field("min_weight", "must be > 0 and at most 1/K"));
        }
        Ok(AggregationState {
            weights: alloc::vec![1.0 / clients as f64; clients],
            round: 0,
            total_rounds,
            base_step,
            min_weight,
        })
    }

    /// `d_r = (1 − r/R) · d` for the 1-based round `r`.
    pub fn step_size(&self, r: usize) -> f64 {
        if self.total_rounds == 0 {
            return 0.0;
        }
        let frac = (r as f64 / self.total_rounds as f64).min(1.0);
        (1.0 - frac) * self.base_step
    }
}

/// One weight update with an explicit step size.
pub fn reweight(prev: &[f64], gaps: &[f64], step: f64, min_weight: f64) -> Result<Vec<f64>> {
    if gaps.len() != prev.len() {
        return Err(Error::dims(prev.len(), gaps.len()));
    }
    if let Some(client) = gaps.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGap { client });
    }
    if gaps.iter().any(|&g| g < -1e-9) {
        return Err(Error::field("gaps", "must be non-negative"));
    }
    let k = gaps.len() as f64;
    let mu = gaps.iter().sum::<f64>() / k;
    let max_dev = gaps.iter().map(|g| g - mu).fold(f64::NEG_INFINITY, f64::max);
    let all_equal = gaps.windows(2).all(|w| w[0] == w[1]);
    if all_equal || max_dev <= 0.0 {
        return Ok(prev.to_vec());
    }
    let raw: Vec<f64> = gaps
        .iter()
        .zip(prev)
        .map(|(g, a)| ((g - mu) * step / max_dev + a).max(min_weight))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|a| a / total).collect())
}

/// Applies the update for the next round and advances the round counter.
pub fn update_weights(state: &AggregationState, gaps: &[f64]) -> Result<AggregationState> {
    if state.round >= state.total_rounds {
        return Err(Error::Config(alloc::format!(
            "aggregation already ran all {} rounds",
            state.total_rounds
        )));
    }
    let r = state.round + 1;
    let weights = reweight(&state.weights, gaps, state.step_size(r), state.min_weight)?;
    Ok(AggregationState {
        weights,
        round: r,
        ..state.clone()
    })
}

/// Element-wise weighted average `Σ a_k θ_k`.
pub fn aggregate(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params.first().ok_or(Error::Empty("no client models"))?;
    if params.len() != weights.len() {
        return Err(Error::dims(params.len(), weights.len()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::WeightSum(sum));
    }
    let mut out = ModelParams::zeros_like(first);
    for (p, &w) in params.iter().zip(weights) {
        out.add_scaled(w, p)?;
    }
    Ok(out)
}

/// FedAvg weights proportional to client sample counts.
pub fn sample_count_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("client sample counts"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// `KL(p ‖ q)` for one discrete distribution pair, with `KL_EPSILON` inside
/// the logarithms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (math::ln(pi + KL_EPSILON) - math::ln(qi + KL_EPSILON)))
        .sum()
}

/// Mean over pixels of `KL(p ‖ q)` for two `[n, c, h, w]` distribution maps.
pub fn mean_pixel_kl(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::dims(p.shape(), q.shape()));
    }
    let [n, c, h, w] = p.shape();
    let plane = h * w;
    let mut total = 0.0;
    let mut pp = alloc::vec![0.0; c];
    let mut qq = alloc::vec![0.0; c];
    for b in 0..n {
        let (pi, qi) = (p.item(b), q.item(b));
        for i in 0..plane {
            for ch in 0..c {
                pp[ch] = pi[ch * plane + i];
                qq[ch] = qi[ch * plane + i];
            }
            total += kl_divergence(&pp, &qq);
        }
    }
    Ok(total / (n * plane) as f64)
}

/// Mean over `images` and pixels of `KL(P_global ‖ P_local)`, both models in
/// inference mode.
pub fn predictive_kl_gap(
    arch: &Architecture,
    global: &ModelParams,
    local: &ModelParams,
    images: &[&Image],
) -> Result<f64> {
    global.check_compatible(local)?;
    if images.is_empty() {
        return Err(Error::Empty("gap dataset"));
    }
    let pg = predict(arch, global, images)?;
    let pl = predict(arch, local, images)?;
    let mut total = 0.0;
    for (a, b) in pg.iter().zip(&pl) {
        total += mean_pixel_kl(a, b)?;
    }
    Ok(total / images.len() as f64)
}
