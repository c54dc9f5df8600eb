//! Deterministic desk-scale simulator for model-heterogeneous federated
//! learning driven by federated conditional generative models.
//!
//! The crate provides:
//! - a minimal dense-network numeric core with exact reverse-mode gradients
//!   ([`nn`], [`tensor`], [`optim`]),
//! - procedural datasets and IID partitioning ([`datasets`]),
//! - three conditional generative families (CVAE, CGAN, mini-DDPM with
//!   classifier-free guidance) behind one train/sample contract ([`gen`]),
//! - the federated round loops (knowledge aggregation, target-network
//!   training, feature-extractor warm-up) and baselines ([`fed`]),
//! - memorization (MND ratio), model-inversion, accuracy and
//!   communication-cost metrics ([`metrics`], [`invert`]),
//! - config parsing, experiment orchestration and report emission
//!   ([`config`], [`runner`], [`report`]).
//!
//! Every run is a pure function of its config and seed: all randomness is
//! drawn from named ChaCha streams and every reduction uses a fixed order,
//! so serial and parallel execution agree bitwise.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod fed;
pub mod gen;
pub mod invert;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
