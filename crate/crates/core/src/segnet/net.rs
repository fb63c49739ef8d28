use alloc::vec::Vec;

use super::{Architecture, ModelParams, Tape};
use crate::seed;
use crate::tensor::{Image, Tensor};
use crate::Result;

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[batch, classes, h, w]` per-pixel class distributions.
    pub probs: Tensor,
    /// First skip, second skip and bottleneck features.
    pub encoder_features: [Tensor; 3],
    /// Distributions decoded from channel-dropped features.
    pub probs_perturbed: Option<Tensor>,
}

/// Forward pass over a batch of images.
pub fn forward(
    arch: &Architecture,
    params: &ModelParams,
    images: &Tensor,
    with_perturbation: bool,
    dropout_p: f64,
    rng_seed: u64,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new(arch, params)?;
    let x = tape.input(images.clone());
    let mut rng = seed::rng(rng_seed, &[]);
    let out = tape.forward(x, with_perturbation.then_some((dropout_p, &mut rng)))?;
    Ok(ForwardOutput {
        probs: tape.tensor(out.probs),
        encoder_features: [
            tape.tensor(out.features.skip1),
            tape.tensor(out.features.skip2),
            tape.tensor(out.features.bottleneck),
        ],
        probs_perturbed: out.probs_perturbed.map(|v| tape.tensor(v)),
    })
}

const PREDICT_CHUNK: usize = 16;

/// Inference-mode class distributions for each image, one
/// `[1, classes, h, w]` tensor per image.
pub fn predict(arch: &Architecture, params: &ModelParams, images: &[&Image]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_CHUNK) {
        let probs = predict_batch(arch, params, &Tensor::from_images(chunk.iter().copied())?)?;
        let [n, c, h, w] = probs.shape();
        for b in 0..n {
            out.push(Tensor::from_vec([1, c, h, w], probs.item(b).to_vec())?);
        }
    }
    Ok(out)
}

/// Inference-mode class distributions for a `[n, 1, s, s]` batch.
pub fn predict_batch(arch: &Architecture, params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(arch, params)?;
    let x = tape.input(images.clone());
    let f = tape.encode(x)?;
    let probs = tape.decode(f);
    Ok(tape.tensor(probs))
}
