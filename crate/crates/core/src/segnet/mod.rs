//! A miniature U-Net with reverse-mode gradients.
//!
//! The network has two downsampling levels and two upsampling levels:
//!
//! ```text
//! x ─ enc1 ─────────────────────────────── concat ─ dec1 ─ head ─ softmax
//!       └ pool ─ enc2 ────────── concat ─ dec2 ┘ up
//!                  └ pool ─ bottleneck ┘ up
//! ```
//!
//! Every convolution is 3×3 with unit padding followed by an ELU, except the
//! 1×1 classification head. The outputs of `enc1`, `enc2` and the bottleneck
//! are the encoder features: they feed the decoder through the skip
//! connections and are where channel dropout is applied for the perturbed
//! decode.

mod augment;
mod kernels;
pub mod loss;
mod net;
mod optim;
mod tape;

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use augment::{strong_augment, weak_augment, Affine, StrongTransform, WeakTransform};
pub use loss::{supervised_loss, SegLossParts, DICE_SMOOTHING};
pub use net::{forward, predict, predict_batch, ForwardOutput};
pub use optim::Adam;
pub use tape::{gradient, Features, Tape, TapeOutput, Var};

use crate::seed::{self, tag};
use crate::{math, Error, Result};

/// Channel widths and input geometry of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image_size: usize,
    /// Output channels of `enc1`, `enc2` and the bottleneck.
    pub widths: [usize; 3],
    pub num_classes: usize,
}

/// Location of one convolution's weights and bias in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvLayer {
    pub w_off: usize,
    pub b_off: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

pub(crate) const ENC1: usize = 0;
pub(crate) const ENC2: usize = 1;
pub(crate) const BOTTLENECK: usize = 2;
pub(crate) const DEC2: usize = 3;
pub(crate) const DEC1: usize = 4;
pub(crate) const HEAD: usize = 5;

const LAYER_NAMES: [&str; 6] = ["enc1", "enc2", "bottleneck", "dec2", "dec1", "head"];

impl Architecture {
    pub fn new(image_size: usize, widths: [usize; 3], num_classes: usize) -> Result<Self> {
        let arch = Architecture {
            image_size,
            widths,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Widths 4/8/16, the default used for 32×32 tasks.
    pub fn small(image_size: usize, num_classes: usize) -> Self {
        Architecture {
            image_size,
            widths: [4, 8, 16],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::field("image_size", "must be a positive multiple of 4"));
        }
        if self.widths.contains(&0) {
            return Err(Error::field("widths", "channel widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::field("num_classes", "need at least two classes"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> [(usize, usize, usize); 6] {
        let [c1, c2, c3] = self.widths;
        [
            (1, c1, 3),
            (c1, c2, 3),
            (c2, c3, 3),
            (c3 + c2, c2, 3),
            (c2 + c1, c1, 3),
            (c1, self.num_classes, 1),
        ]
    }

    pub(crate) fn layers(&self) -> [ConvLayer; 6] {
        let mut off = 0;
        self.layer_dims().map(|(cin, cout, k)| {
            let w_off = off;
            let b_off = w_off + cout * cin * k * k;
            off = b_off + cout;
            ConvLayer {
                w_off,
                b_off,
                cin,
                cout,
                k,
            }
        })
    }

    pub fn manifest(&self) -> Manifest {
        let mut layers = Vec::with_capacity(12);
        for ((cin, cout, k), (name, conv)) in self
            .layer_dims()
            .into_iter()
            .zip(LAYER_NAMES.into_iter().zip(self.layers()))
        {
            layers.push(LayerEntry {
                name: alloc::format!("{name}.weight"),
                shape: vec![cout, cin, k, k],
                offset: conv.w_off,
            });
            layers.push(LayerEntry {
                name: alloc::format!("{name}.bias"),
                shape: vec![cout],
                offset: conv.b_off,
            });
        }
        Manifest { layers }
    }

    pub fn num_params(&self) -> usize {
        self.manifest().total_len()
    }

    /// He-normal weights and zero biases.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut rng = seed::rng(seed, &[tag::INIT]);
        let mut values = vec![0.0; self.num_params()];
        for conv in self.layers() {
            let fan_in = (conv.cin * conv.k * conv.k) as f64;
            let normal = Normal::new(0.0, math::sqrt(2.0 / fan_in)).expect("positive std");
            for v in &mut values[conv.w_off..conv.b_off] {
                *v = normal.sample(&mut rng);
            }
        }
        ModelParams {
            values,
            manifest: self.manifest(),
        }
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.manifest != self.manifest() {
            return Err(Error::ManifestMismatch);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered layout of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub layers: Vec<LayerEntry>,
}

impl Manifest {
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(LayerEntry::len).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Entries must tile `0..total_len()` contiguously and in order.
    pub fn validate(&self) -> Result<()> {
        let mut off = 0;
        for l in &self.layers {
            if l.offset != off {
                return Err(Error::Config(alloc::format!(
                    "layer `{}` starts at {} but {} was expected",
                    l.name,
                    l.offset,
                    off
                )));
            }
            off += l.len();
        }
        Ok(())
    }
}

/// Flat model parameters plus the manifest describing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f64>,
    manifest: Manifest,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        if manifest.total_len() != values.len() {
            return Err(Error::dims(manifest.total_len(), values.len()));
        }
        Ok(ModelParams { values, manifest })
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        ModelParams {
            values: vec![0.0; other.values.len()],
            manifest: other.manifest.clone(),
        }
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.manifest != other.manifest {
            return Err(Error::ManifestMismatch);
        }
        Ok(())
    }

    /// `self ← self + alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// FNV-1a over the manifest and the raw bits of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for l in &self.manifest.layers {
            h.write(l.name.as_bytes());
            for &d in &l.shape {
                h.write(&(d as u64).to_le_bytes());
            }
            h.write(&(l.offset as u64).to_le_bytes());
        }
        for v in &self.values {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.0
    }

    pub fn layer_values(&self, name: &str) -> Option<&[f64]> {
        self.manifest
            .layer(name)
            .map(|l| &self.values[l.offset..l.offset + l.len()])
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

impl core::fmt::Display for Architecture {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "unet2-{}px-{}x{}x{}-c{}",
            self.image_size, self.widths[0], self.widths[1], self.widths[2], self.num_classes
        )
    }
}

impl Architecture {
    /// Short identifier of the layout, stable across runs.
    pub fn tag(&self) -> String {
        self.to_string()
    }
}
