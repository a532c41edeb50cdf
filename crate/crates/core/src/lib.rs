//! Class-erasing pair synthesis and open-set training over Gaussian-mixture worlds.
//!
//! A pretrained text-to-image diffusion model is replaced by [`oracle::NoisePredictorOracle`],
//! an exact closed-form noise predictor for a labelled Gaussian mixture. On top of it the crate
//! provides:
//!
//! - DDIM sampling, classifier-free guidance and conditional DDIM inversion ([`diffusion`]),
//!   used to synthesise a positive and a negative instance for every (training sample, known
//!   class) pair;
//! - executable identity checks for the inversion and reverse-process decompositions
//!   ([`analysis`]);
//! - a one-hidden-layer classifier with a one-vs-all open-set head and a closed-set head, its
//!   losses and hand-derived gradients ([`classifier`]);
//! - confidence-based pseudo-labelling ([`labeling`]), the training loop ([`trainer`]) and the
//!   evaluation metrics ([`metrics`]).

pub mod analysis;
pub mod classifier;
pub mod diffusion;
mod error;
pub mod labeling;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod vecops;
pub mod world;

pub use error::{Error, Result};
pub use world::{ClassId, Role};
