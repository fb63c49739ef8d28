//! Synthetic multi-domain segmentation tasks.
//!
//! Each domain draws the same family of scenes (one to three foreground
//! objects over a sinusoidally textured background) and then applies its own
//! intensity gain, bias, noise level, texture frequency and object scale.
//! Odd classes are drawn as ellipses and even classes as rectangles, so
//! class identity is carried by shape as well as by intensity.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::seed::{self, tag};
use crate::tensor::{Image, Mask};
use crate::{Error, Result};

/// Domain-independent scene appearance before the domain transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    /// Base background intensity.
    pub background: f64,
    /// Amplitude of the background sinusoid.
    pub texture_amplitude: f64,
    /// Base intensity of each foreground class, class 1 first.
    pub foreground_levels: Vec<f64>,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance {
            background: 0.3,
            texture_amplitude: 0.08,
            foreground_levels: vec![0.65, 0.9],
        }
    }
}

impl Appearance {
    /// Number of classes including background.
    pub fn num_classes(&self) -> usize {
        self.foreground_levels.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub intensity_gain: f64,
    pub intensity_bias: f64,
    pub noise_sigma: f64,
    /// Background sinusoid frequency in cycles per image.
    pub texture_freq: f64,
    pub shape_scale: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub image_size: usize,
    #[serde(default)]
    pub appearance: Appearance,
}

impl DomainSpec {
    pub fn new(domain_id: u32) -> Self {
        DomainSpec {
            domain_id,
            intensity_gain: 1.0,
            intensity_bias: 0.0,
            noise_sigma: 0.03,
            texture_freq: 2.0,
            shape_scale: 1.0,
            n_labeled: 10,
            n_unlabeled: 100,
            image_size: 32,
            appearance: Appearance::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.appearance.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.intensity_gain.is_finite() {
            return Err(Error::field("intensity_gain", "must be finite"));
        }
        if !self.intensity_bias.is_finite() {
            return Err(Error::field("intensity_bias", "must be finite"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::field("noise_sigma", "must be finite and >= 0"));
        }
        if !(self.texture_freq > 0.0 && self.texture_freq.is_finite()) {
            return Err(Error::field("texture_freq", "must be finite and > 0"));
        }
        if !(0.5..=1.5).contains(&self.shape_scale) {
            return Err(Error::field("shape_scale", "must lie in [0.5, 1.5]"));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::field(
                "image_size",
                "must be a multiple of 4 and at least 8",
            ));
        }
        if self.n_labeled + self.n_unlabeled == 0 {
            return Err(Error::field("n_labeled", "domain must contain samples"));
        }
        let levels = &self.appearance.foreground_levels;
        if levels.is_empty() || levels.len() > 254 {
            return Err(Error::field(
                "appearance.foreground_levels",
                "need between 1 and 254 foreground classes",
            ));
        }
        if levels
            .iter()
            .chain([&self.appearance.background])
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::field("appearance", "intensity levels must lie in [0, 1]"));
        }
        if !(self.appearance.texture_amplitude >= 0.0) {
            return Err(Error::field("appearance.texture_amplitude", "must be >= 0"));
        }
        Ok(())
    }

    fn shift_params(&self) -> [f64; 5] {
        [
            self.intensity_gain,
            self.intensity_bias,
            self.noise_sigma,
            self.texture_freq,
            self.shape_scale,
        ]
    }

    /// Largest difference in gain or bias between two domains.
    pub fn shift_distance(&self, other: &DomainSpec) -> f64 {
        let dg = (self.intensity_gain - other.intensity_gain).abs();
        let db = (self.intensity_bias - other.intensity_bias).abs();
        dg.max(db)
    }
}

/// One image with its class map.
///
/// Unlabeled samples keep their ground truth in a private slot reachable only
/// through [`Sample::diagnostic_mask`] and [`DomainData::revealed`]; training
/// code receives images alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub mask: Option<Mask>,
    pub domain_id: u32,
    /// Position of the sample within its domain.
    pub index: usize,
    pub labeled: bool,
    hidden_truth: Option<Mask>,
}

impl Sample {
    pub fn labeled(image: Image, mask: Mask, domain_id: u32, index: usize) -> Self {
        Sample {
            image,
            mask: Some(mask),
            domain_id,
            index,
            labeled: true,
            hidden_truth: None,
        }
    }

    pub fn unlabeled(image: Image, hidden_truth: Option<Mask>, domain_id: u32, index: usize) -> Self {
        Sample {
            image,
            mask: None,
            domain_id,
            index,
            labeled: false,
            hidden_truth,
        }
    }

    /// Ground truth of an unlabeled sample, for diagnostics only.
    pub fn diagnostic_mask(&self) -> Option<&Mask> {
        self.mask.as_ref().or(self.hidden_truth.as_ref())
    }
}

/// Samples drawn from one domain, split into labeled and unlabeled sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl DomainData {
    fn from_samples(spec: DomainSpec, samples: Vec<Sample>) -> Self {
        let (labeled, unlabeled) = samples.into_iter().partition(|s| s.labeled);
        DomainData {
            spec,
            labeled,
            unlabeled,
        }
    }

    /// The same domain with every unlabeled sample's ground truth promoted to a
    /// label. Used only by the fully-labeled reference strategy.
    pub fn revealed(&self) -> DomainData {
        let mut labeled = self.labeled.clone();
        labeled.extend(self.unlabeled.iter().filter_map(|s| {
            s.hidden_truth
                .clone()
                .map(|m| Sample::labeled(s.image.clone(), m, s.domain_id, s.index))
        }));
        DomainData {
            spec: self.spec.clone(),
            labeled,
            unlabeled: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates the samples of one domain. The first `n_labeled` samples carry
/// masks; the remaining `n_unlabeled` do not.
pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let total = spec.n_labeled + spec.n_unlabeled;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|_| Error::field("noise_sigma", "invalid standard deviation"))?;
    let samples = (0..total)
        .map(|index| {
            let mut rng = seed::rng(seed, &[tag::SAMPLE, index as u64]);
            let (image, mask) = draw_scene(spec, &noise, &mut rng);
            if index < spec.n_labeled {
                Sample::labeled(image, mask, spec.domain_id, index)
            } else {
                Sample::unlabeled(image, Some(mask), spec.domain_id, index)
            }
        })
        .collect();
    Ok(samples)
}

fn draw_scene<R: Rng>(spec: &DomainSpec, noise: &Normal<f64>, rng: &mut R) -> (Image, Mask) {
    let s = spec.image_size;
    let sf = s as f64;
    let app = &spec.appearance;
    let n_fg = app.foreground_levels.len();
    let mut mask = Mask::empty(s);

    let n_objects = rng.random_range(1..=3usize);
    for _ in 0..n_objects {
        let class = rng.random_range(1..=n_fg) as u8;
        let lo = 0.1 * sf * spec.shape_scale;
        let hi = 0.2 * sf * spec.shape_scale;
        let rx = rng.random_range(lo..hi);
        let ry = rng.random_range(lo..hi);
        let cx = rng.random_range(rx..(sf - 1.0 - rx).max(rx + 1e-9));
        let cy = rng.random_range(ry..(sf - 1.0 - ry).max(ry + 1e-9));
        let ellipse = class % 2 == 1;
        for y in 0..s {
            for x in 0..s {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    mask.set(y, x, class);
                }
            }
        }
    }

    let angle = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (math::cos(angle), math::sin(angle));
    let mut pixels = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let class = mask.get(y, x) as usize;
            let base = if class == 0 {
                let t = (x as f64 * ca + y as f64 * sa) / sf;
                app.background + app.texture_amplitude * math::sin(2.0 * PI * spec.texture_freq * t + phase)
            } else {
                app.foreground_levels[class - 1]
            };
            let eps = if spec.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            pixels[y * s + x] =
                (spec.intensity_gain * base + spec.intensity_bias + eps).clamp(0.0, 1.0);
        }
    }
    (Image::new(s, pixels).expect("square image"), mask)
}

/// Layout of a leave-one-domain-out federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// All domains; one of them is held out as the unseen domain.
    pub domains: Vec<DomainSpec>,
    /// Labeled evaluation samples generated for the unseen domain.
    pub eval_size: usize,
    /// Minimum gain/bias distance between the unseen domain and every seen one.
    pub shift_margin: f64,
}

impl TaskConfig {
    /// Four domains at 32×32 with three classes, ten labeled and one hundred
    /// unlabeled images per domain.
    pub fn desk_scale() -> Self {
        let shifts = [
            (1.0, 0.0, 0.03, 2.0, 1.0),
            (0.75, 0.12, 0.05, 3.0, 0.9),
            (1.2, -0.08, 0.04, 1.5, 1.1),
            (0.6, 0.28, 0.08, 4.0, 1.2),
        ];
        let domains = shifts
            .iter()
            .enumerate()
            .map(|(i, &(gain, bias, noise, freq, scale))| DomainSpec {
                intensity_gain: gain,
                intensity_bias: bias,
                noise_sigma: noise,
                texture_freq: freq,
                shape_scale: scale,
                ..DomainSpec::new(i as u32)
            })
            .collect();
        TaskConfig {
            domains,
            eval_size: 50,
            shift_margin: 0.1,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.domains.first().map_or(0, DomainSpec::num_classes)
    }

    pub fn image_size(&self) -> usize {
        self.domains.first().map_or(0, |d| d.image_size)
    }

    /// Sets every domain's labeled count, keeping its unlabeled count.
    pub fn with_labels_per_domain(mut self, n_labeled: usize) -> Self {
        for d in &mut self.domains {
            d.n_labeled = n_labeled;
        }
        self
    }

    pub fn validate(&self, unseen: usize) -> Result<()> {
        if self.domains.len() < 3 {
            return Err(Error::Config(format!(
                "need at least 2 seen domains plus one unseen, got {} domains",
                self.domains.len()
            )));
        }
        if unseen >= self.domains.len() {
            return Err(Error::Config(format!(
                "unseen domain index {unseen} out of range for {} domains",
                self.domains.len()
            )));
        }
        if self.eval_size == 0 {
            return Err(Error::field("eval_size", "must be >= 1"));
        }
        let first = &self.domains[0];
        for (i, d) in self.domains.iter().enumerate() {
            d.validate()?;
            if d.image_size != first.image_size || d.appearance != first.appearance {
                return Err(Error::Config(format!(
                    "domain {i} disagrees with domain 0 on image size or appearance"
                )));
            }
            if i != unseen && d.n_labeled == 0 {
                return Err(Error::field("n_labeled", "seen domains need >= 1 labeled sample"));
            }
            for (j, e) in self.domains.iter().enumerate().skip(i + 1) {
                if d.domain_id == e.domain_id {
                    return Err(Error::Config(format!("domains {i} and {j} share an id")));
                }
                if d.shift_params() == e.shift_params() {
                    return Err(Error::Config(format!(
                        "domain specs must differ: domains {i} and {j} have identical shift parameters"
                    )));
                }
            }
        }
        let target = &self.domains[unseen];
        for (i, d) in self.domains.iter().enumerate() {
            if i != unseen && target.shift_distance(d) < self.shift_margin {
                return Err(Error::Config(format!(
                    "unseen domain {unseen} is within shift margin {} of seen domain {i}",
                    self.shift_margin
                )));
            }
        }
        Ok(())
    }
}

/// A set of seen client domains plus one held-out evaluation domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationTask {
    pub seen: Vec<DomainData>,
    pub unseen: DomainData,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl FederationTask {
    pub fn num_clients(&self) -> usize {
        self.seen.len()
    }
}

/// Builds the task holding out `config.domains[unseen]`.
pub fn make_task(config: &TaskConfig, unseen: usize, seed: u64) -> Result<FederationTask> {
    config.validate(unseen)?;
    let mut seen = Vec::with_capacity(config.domains.len() - 1);
    let mut held_out = None;
    for (i, spec) in config.domains.iter().enumerate() {
        let mut spec = spec.clone();
        if i == unseen {
            spec.n_labeled = config.eval_size;
            spec.n_unlabeled = 0;
        }
        let domain_seed = seed::derive(seed, &[tag::DOMAIN, u64::from(spec.domain_id)]);
        let samples = generate_domain(&spec, domain_seed)?;
        let data = DomainData::from_samples(spec, samples);
        if i == unseen {
            held_out = Some(data);
        } else {
            seen.push(data);
        }
    }
    Ok(FederationTask {
        seen,
        unseen: held_out.expect("validated index"),
        num_classes: config.num_classes(),
        image_size: config.image_size(),
        seed,
    })
}
