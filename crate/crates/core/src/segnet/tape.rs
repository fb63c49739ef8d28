//! Reverse-mode differentiation over the network's operations.
//!
//! A [`Tape`] records every intermediate value in evaluation order. Model
//! parameters are an implicit input shared by all convolutions, so
//! [`Tape::backward`] returns one flat gradient with the parameter layout.
//! Values entering through [`Tape::input`] are constants: nothing flows back
//! into them, which is how teacher predictions and pseudo-labels stay out of
//! the student's gradient.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels as k;
use super::loss;
use super::{Architecture, ConvLayer, ModelParams, BOTTLENECK, DEC1, DEC2, ENC1, ENC2, HEAD};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { x: usize, layer: ConvLayer },
    Elu { x: usize },
    AvgPool { x: usize },
    Upsample { x: usize },
    Concat { a: usize, b: usize },
    ChannelScale { x: usize, scales: Vec<f64> },
    Softmax { x: usize },
    SegLoss { probs: usize, labels: Vec<u8>, weights: Vec<f64>, eta: f64 },
    MeanSqDiff { a: usize, b: usize },
    HalfSqNormParams,
    Linear { terms: Vec<(usize, f64)> },
}

struct Node {
    shape: [usize; 4],
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    name: Option<&'static str>,
}

/// Encoder outputs consumed by the decoder.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub skip1: Var,
    pub skip2: Var,
    pub bottleneck: Var,
}

/// Handles produced by [`Tape::forward`].
#[derive(Debug, Clone, Copy)]
pub struct TapeOutput {
    pub probs: Var,
    pub features: Features,
    pub probs_perturbed: Option<Var>,
}

pub struct Tape<'p> {
    arch: Architecture,
    params: &'p [f64],
    nodes: Vec<Node>,
}

const SCALAR: [usize; 4] = [1, 1, 1, 1];

impl<'p> Tape<'p> {
    pub fn new(arch: &Architecture, params: &'p ModelParams) -> Result<Self> {
        arch.check_params(params)?;
        Ok(Tape {
            arch: *arch,
            params: params.values(),
            nodes: Vec::new(),
        })
    }

    fn push(&mut self, shape: [usize; 4], value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Records a constant tensor.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.push(SCALAR, vec![v], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape, n.value.clone()).expect("consistent node")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Attaches a name used when reporting non-finite losses.
    pub fn named(&mut self, v: Var, name: &'static str) -> Var {
        self.nodes[v.0].name = Some(name);
        v
    }

    pub(crate) fn conv(&mut self, x: Var, layer: ConvLayer) -> Var {
        let [n, c, h, w] = self.shape(x);
        debug_assert_eq!(c, layer.cin);
        let shape = [n, layer.cout, h, w];
        let mut out = vec![0.0; shape.iter().product()];
        k::conv_forward(self.value(x), [n, c, h, w], self.params, &layer, &mut out);
        self.push(shape, out, Op::Conv { x: x.0, layer }, true)
    }

    pub(crate) fn elu(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let mut out = vec![0.0; shape.iter().product()];
        k::elu_forward(self.value(x), &mut out);
        let ng = self.needs(x.0);
        self.push(shape, out, Op::Elu { x: x.0 }, ng)
    }

    pub(crate) fn avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, c, h / 2, w / 2];
        let mut out = vec![0.0; shape.iter().product()];
        k::avg_pool_forward(self.value(x), [n, c, h, w], &mut out);
        let ng = self.needs(x.0);
        self.push(shape, out, Op::AvgPool { x: x.0 }, ng)
    }

    pub(crate) fn upsample(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, c, 2 * h, 2 * w];
        let mut out = vec![0.0; shape.iter().product()];
        k::upsample_forward(self.value(x), [n, c, h, w], &mut out);
        let ng = self.needs(x.0);
        self.push(shape, out, Op::Upsample { x: x.0 }, ng)
    }

    pub(crate) fn concat(&mut self, a: Var, b: Var) -> Var {
        let [n, ca, h, w] = self.shape(a);
        let cb = self.shape(b)[1];
        let shape = [n, ca + cb, h, w];
        let mut out = vec![0.0; shape.iter().product()];
        k::concat_forward(self.value(a), ca, self.value(b), cb, n, h * w, &mut out);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(shape, out, Op::Concat { a: a.0, b: b.0 }, ng)
    }

    /// Multiplies each `(batch, channel)` plane by its own factor.
    pub(crate) fn channel_scale(&mut self, x: Var, scales: Vec<f64>) -> Var {
        let shape = self.shape(x);
        let plane = shape[2] * shape[3];
        debug_assert_eq!(scales.len(), shape[0] * shape[1]);
        let mut out = self.value(x).to_vec();
        for (chunk, &s) in out.chunks_mut(plane).zip(&scales) {
            for v in chunk {
                *v *= s;
            }
        }
        let ng = self.needs(x.0);
        self.push(shape, out, Op::ChannelScale { x: x.0, scales }, ng)
    }

    /// Zeroes each channel independently with probability `p` and rescales the
    /// survivors by `1/(1−p)`.
    pub fn channel_dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        let [n, c, _, _] = self.shape(x);
        let keep = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
        let scales = (0..n * c)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.channel_scale(x, scales)
    }

    pub(crate) fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let mut out = vec![0.0; shape.iter().product()];
        k::softmax_forward(self.value(x), shape, &mut out);
        let ng = self.needs(x.0);
        self.push(shape, out, Op::Softmax { x: x.0 }, ng)
    }

    /// Runs the encoder.
    pub fn encode(&mut self, x: Var) -> Result<Features> {
        let [_, c, h, w] = self.shape(x);
        let s = self.arch.image_size;
        if c != 1 || h != s || w != s {
            return Err(Error::dims([1, s, s], [c, h, w]));
        }
        let layers = self.arch.layers();
        let e1 = self.conv(x, layers[ENC1]);
        let skip1 = self.elu(e1);
        let p1 = self.avg_pool(skip1);
        let e2 = self.conv(p1, layers[ENC2]);
        let skip2 = self.elu(e2);
        let p2 = self.avg_pool(skip2);
        let b = self.conv(p2, layers[BOTTLENECK]);
        let bottleneck = self.elu(b);
        Ok(Features {
            skip1,
            skip2,
            bottleneck,
        })
    }

    /// Runs the decoder and classification head, returning class probabilities.
    pub fn decode(&mut self, f: Features) -> Var {
        let layers = self.arch.layers();
        let u2 = self.upsample(f.bottleneck);
        let c2 = self.concat(u2, f.skip2);
        let d2 = self.conv(c2, layers[DEC2]);
        let d2 = self.elu(d2);
        let u1 = self.upsample(d2);
        let c1 = self.concat(u1, f.skip1);
        let d1 = self.conv(c1, layers[DEC1]);
        let d1 = self.elu(d1);
        let logits = self.conv(d1, layers[HEAD]);
        self.softmax(logits)
    }

    /// Full forward pass. With `perturbation = Some((p, rng))` a second decode
    /// is run from channel-dropped bottleneck and skip features.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        perturbation: Option<(f64, &mut R)>,
    ) -> Result<TapeOutput> {
        let features = self.encode(x)?;
        let probs = self.decode(features);
        let probs_perturbed = match perturbation {
            Some((p, rng)) => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::field("dropout_p", "must lie in [0, 1]"));
                }
                let dropped = Features {
                    skip1: self.channel_dropout(features.skip1, p, rng),
                    skip2: self.channel_dropout(features.skip2, p, rng),
                    bottleneck: self.channel_dropout(features.bottleneck, p, rng),
                };
                Some(self.decode(dropped))
            }
            None => None,
        };
        Ok(TapeOutput {
            probs,
            features,
            probs_perturbed,
        })
    }

    /// Cross-entropy plus `eta`·Dice over pixels with non-zero weight.
    pub fn seg_loss(&mut self, probs: Var, labels: Vec<u8>, weights: Vec<f64>, eta: f64) -> Result<Var> {
        let t = self.tensor(probs);
        let v = loss::masked_seg_loss(&t, &labels, &weights)?.total(eta);
        let ng = self.needs(probs.0);
        Ok(self.push(
            SCALAR,
            vec![v],
            Op::SegLoss {
                probs: probs.0,
                labels,
                weights,
                eta,
            },
            ng,
        ))
    }

    /// Mean squared difference over all elements of two equal-shape values.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape != self.shape(b) {
            return Err(Error::dims(shape, self.shape(b)));
        }
        let v = loss::mean_sq_diff(self.value(a), self.value(b));
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(SCALAR, vec![v], Op::MeanSqDiff { a: a.0, b: b.0 }, ng))
    }

    /// `‖θ‖² / 2` over the model parameters.
    pub fn half_sq_norm_params(&mut self) -> Var {
        let v = 0.5 * self.params.iter().map(|p| p * p).sum::<f64>();
        self.push(SCALAR, vec![v], Op::HalfSqNormParams, true)
    }

    /// `Σ wᵢ·vᵢ` over scalar values.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(x, w)| w * self.scalar(x)).sum();
        let ng = terms.iter().any(|&(x, _)| self.needs(x.0));
        let terms = terms.iter().map(|&(x, w)| (x.0, w)).collect();
        self.push(SCALAR, vec![v], Op::Linear { terms }, ng)
    }

    fn first_non_finite_name(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| n.name.is_some() && n.value.iter().any(|v| !v.is_finite()))
            .and_then(|n| n.name)
    }

    /// Gradient of the scalar `root` with respect to the model parameters.
    pub fn backward(&self, root: Var) -> Vec<f64> {
        let mut gparams = vec![0.0; self.params.len()];
        if !self.needs(root.0) {
            return gparams;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'g mut [f64] {
            grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()])
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, layer } => {
                    let xs = nodes[*x].shape;
                    let gx = if nodes[*x].needs_grad {
                        Some(slot(&mut grads, nodes, *x))
                    } else {
                        None
                    };
                    k::conv_backward(&nodes[*x].value, xs, self.params, layer, &g, &mut gparams, gx);
                }
                Op::Elu { x } => {
                    let gx = slot(&mut grads, nodes, *x);
                    k::elu_backward(&node.value, &g, gx);
                }
                Op::AvgPool { x } => {
                    let xs = nodes[*x].shape;
                    k::avg_pool_backward(&g, xs, slot(&mut grads, nodes, *x));
                }
                Op::Upsample { x } => {
                    let xs = nodes[*x].shape;
                    k::upsample_backward(&g, xs, slot(&mut grads, nodes, *x));
                }
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = nodes[*a].shape;
                    let cb = nodes[*b].shape[1];
                    let ga = nodes[*a].needs_grad.then(|| {
                        grads[*a].take().unwrap_or_else(|| vec![0.0; nodes[*a].value.len()])
                    });
                    let gb = nodes[*b].needs_grad.then(|| {
                        grads[*b].take().unwrap_or_else(|| vec![0.0; nodes[*b].value.len()])
                    });
                    let (mut ga, mut gb) = (ga, gb);
                    k::concat_backward(&g, ca, cb, n, h * w, ga.as_deref_mut(), gb.as_deref_mut());
                    if let Some(ga) = ga {
                        grads[*a] = Some(ga);
                    }
                    if let Some(gb) = gb {
                        grads[*b] = Some(gb);
                    }
                }
                Op::ChannelScale { x, scales } => {
                    let plane = node.shape[2] * node.shape[3];
                    let gx = slot(&mut grads, nodes, *x);
                    for ((dst, src), &s) in gx.chunks_mut(plane).zip(g.chunks(plane)).zip(scales) {
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += s * v;
                        }
                    }
                }
                Op::Softmax { x } => {
                    let gx = slot(&mut grads, nodes, *x);
                    k::softmax_backward(&node.value, node.shape, &g, gx);
                }
                Op::SegLoss {
                    probs,
                    labels,
                    weights,
                    eta,
                } => {
                    let t = Tensor::from_vec(nodes[*probs].shape, nodes[*probs].value.clone())
                        .expect("consistent node");
                    let gp = slot(&mut grads, nodes, *probs);
                    loss::masked_seg_loss_grad(&t, labels, weights, *eta, g[0], gp);
                }
                Op::MeanSqDiff { a, b } => {
                    let count = nodes[*a].value.len().max(1) as f64;
                    let scale = 2.0 * g[0] / count;
                    let diff: Vec<f64> = nodes[*a]
                        .value
                        .iter()
                        .zip(&nodes[*b].value)
                        .map(|(x, y)| scale * (x - y))
                        .collect();
                    if nodes[*a].needs_grad {
                        for (d, v) in slot(&mut grads, nodes, *a).iter_mut().zip(&diff) {
                            *d += v;
                        }
                    }
                    if nodes[*b].needs_grad {
                        for (d, v) in slot(&mut grads, nodes, *b).iter_mut().zip(&diff) {
                            *d -= v;
                        }
                    }
                }
                Op::HalfSqNormParams => {
                    for (d, p) in gparams.iter_mut().zip(self.params) {
                        *d += g[0] * p;
                    }
                }
                Op::Linear { terms } => {
                    for &(x, w) in terms {
                        if nodes[x].needs_grad {
                            slot(&mut grads, nodes, x)[0] += w * g[0];
                        }
                    }
                }
            }
        }
        gparams
    }
}

/// Evaluates the scalar loss built by `build` and its parameter gradient.
///
/// A non-finite loss is reported with the name of the first named term that
/// is non-finite, or `"loss"` when no named term is at fault.
pub fn gradient<F>(arch: &Architecture, params: &ModelParams, build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(arch, params)?;
    let root = build(&mut tape)?;
    if tape.shape(root) != SCALAR {
        return Err(Error::dims(SCALAR, tape.shape(root)));
    }
    let value = tape.scalar(root);
    if !value.is_finite() {
        let term = tape.first_non_finite_name().unwrap_or("loss");
        return Err(Error::NonFinite { term: term.into() });
    }
    Ok((value, tape.backward(root)))
}
