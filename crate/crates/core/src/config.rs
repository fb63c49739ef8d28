//! Experiment configuration.
//!
//! Defaults follow the published training recipe where it gives a value
//! (loss weights, EMA decays, quantile ramp, dropout rate, Adam momenta,
//! batch sizes) and otherwise pick desk-scale values.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domainsim::TaskConfig;
use crate::segnet::Architecture;
use crate::{Error, Result};

/// Whether pseudo-label acceptance is decided per pixel or per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterGranularity {
    #[default]
    Pixel,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Weight of the unlabeled consistency loss.
    pub lambda1: f64,
    /// Weight of the perturbation alignment loss.
    pub lambda2: f64,
    /// EMA decay of the dynamic teacher.
    pub pi1: f64,
    /// Smoothing of the running uncertainty threshold.
    pub pi2: f64,
    pub delta_start: f64,
    pub delta_end: f64,
    /// Weight of the Dice term in the segmentation loss.
    pub eta: f64,
    pub dropout_p: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Federated rounds.
    #[serde(rename = "R")]
    pub rounds: usize,
    /// Base step of the aggregation-weight update.
    pub d: f64,
    pub min_weight: f64,
    /// Evaluate the global model on the unseen domain every this many rounds.
    pub eval_every: usize,
    pub entropy_epsilon: f64,
    /// Confidence threshold of the single-teacher pseudo-labeling path.
    pub fixmatch_confidence: f64,
    pub filter: FilterGranularity,
    /// Fraction of each seen domain's labeled images held out for validation.
    pub validation_fraction: f64,
    pub widths: [usize; 3],
    /// Seen-domain position trained by the local-only baselines.
    pub local_domain: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda1: 1.0,
            lambda2: 0.3,
            pi1: 0.99,
            pi2: 0.9,
            delta_start: 0.15,
            delta_end: 0.3,
            eta: 1.0,
            dropout_p: 0.3,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            batch_labeled: 8,
            batch_unlabeled: 8,
            rounds: 100,
            d: 0.1,
            min_weight: 1e-3,
            eval_every: 10,
            entropy_epsilon: 1e-8,
            fixmatch_confidence: 0.95,
            filter: FilterGranularity::Pixel,
            validation_fraction: 0.1,
            widths: [4, 8, 16],
            local_domain: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::field("training.lambda1", "loss weights must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.pi1) {
            return Err(Error::field("training.pi1", "must lie in [0, 1)"));
        }
        if !unit_open(self.pi2) {
            return Err(Error::field("training.pi2", "must lie in (0, 1)"));
        }
        if !(unit_open(self.delta_start) && unit_open(self.delta_end)) || self.delta_end < self.delta_start {
            return Err(Error::field(
                "training.delta_start",
                "quantiles must lie in (0, 1) with delta_start <= delta_end",
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::field("training.dropout_p", "must lie in [0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::field("training.lr", "must be > 0"));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::field("training.batch_labeled", "batch sizes must be >= 1"));
        }
        if !(self.d > 0.0) {
            return Err(Error::field("training.d", "must be > 0"));
        }
        if !(self.min_weight > 0.0) {
            return Err(Error::field("training.min_weight", "must be > 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::field("training.eval_every", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::field("training.validation_fraction", "must lie in [0, 1)"));
        }
        if !(self.fixmatch_confidence > 0.0 && self.fixmatch_confidence <= 1.0) {
            return Err(Error::field("training.fixmatch_confidence", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn architecture(&self, task: &TaskConfig) -> Result<Architecture> {
        Architecture::new(task.image_size(), self.widths, task.num_classes())
    }
}

/// Which experiments a suite runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    /// Domain positions held out in turn; empty means every domain.
    pub unseen: Vec<usize>,
    /// Per-domain labeled counts to sweep; empty keeps the task's counts.
    pub label_counts: Vec<usize>,
    /// Master seed from which every experiment seed is derived.
    pub master_seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            strategies: vec![String::from("fgasl")],
            seeds: vec![0],
            unseen: Vec::new(),
            label_counts: Vec::new(),
            master_seed: 0,
        }
    }
}

/// The complete configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "TaskConfig::desk_scale")]
    pub task: TaskConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub suite: SuiteConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            task: TaskConfig::desk_scale(),
            training: TrainingConfig::default(),
            suite: SuiteConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.suite.strategies.is_empty() {
            return Err(Error::field("suite.strategies", "need at least one strategy"));
        }
        if self.suite.seeds.is_empty() {
            return Err(Error::field("suite.seeds", "need at least one seed"));
        }
        for &u in &self.suite.unseen {
            self.task.validate(u)?;
        }
        if self.suite.unseen.is_empty() {
            for u in 0..self.task.domains.len() {
                self.task.validate(u)?;
            }
        }
        if self.suite.label_counts.contains(&0) {
            return Err(Error::field("suite.label_counts", "label counts must be >= 1"));
        }
        self.training.architecture(&self.task)?;
        Ok(())
    }

    /// Domain positions held out by the suite.
    pub fn unseen_domains(&self) -> Vec<usize> {
        if self.suite.unseen.is_empty() {
            (0..self.task.domains.len()).collect()
        } else {
            self.suite.unseen.clone()
        }
    }
}
