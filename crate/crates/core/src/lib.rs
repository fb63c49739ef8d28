//! Allocation-only core of a federated semi-supervised segmentation simulator.
//!
//! The crate covers synthetic multi-domain task generation ([`domainsim`]), a
//! miniature encoder-decoder with reverse-mode gradients ([`segnet`]), client-side
//! dual-teacher training ([`dualteacher`]), generalization-aware server
//! aggregation ([`gaa`]), segmentation metrics ([`evalmetrics`]) and the round
//! loop tying them together ([`orchestrator`]). Everything here is a pure
//! function of its inputs and seeds; file formats, the command line and
//! parallel execution live in the companion `fgasl` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod config;
pub mod domainsim;
pub mod dualteacher;
mod error;
pub mod evalmetrics;
pub mod gaa;
mod math;
pub mod orchestrator;
pub mod seed;
pub mod segnet;
pub mod tensor;

pub use error::{Error, Result};
