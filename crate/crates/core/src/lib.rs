//! Generative reversible data hiding.
//!
//! A message is cut into `k`-bit groups, each group becomes one component
//! of a noise vector ([`codec`]); a generator turns the noise into a cover
//! image and a cycle-consistent translator turns the cover into the
//! transmitted marked image ([`pipeline::hide`]). The receiver holds two
//! independently usable keys: an extractor network that regresses the
//! noise vector back out of the marked image, and the reverse translator
//! that restores the cover.
//!
//! Module map:
//! - [`codec`]: bit groups to interval-constrained noise and back
//! - [`data`]: image tensors, folder loading, synthetic two-domain data
//! - [`nets`]: the network roles and their checkpoints
//! - [`training`]: loss functions and the three training phases
//! - [`pipeline`]: hide / reveal / restore and key material
//! - [`metrics`]: bit accuracy, PSNR and parameter sweeps

pub mod codec;
pub mod data;
mod error;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
