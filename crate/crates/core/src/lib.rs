//! In-context policy adaptation with cross-domain skill diffusion.
//!
//! Pipeline: generate a multi-domain expert dataset on toy point-mass
//! environments, learn domain-agnostic skill embeddings together with a
//! diffusion-based, domain-conditioned action decoder, train a skill-space
//! policy in the source domain, then adapt that frozen policy to unseen
//! target domains purely through retrieval-based domain prompting over a
//! handful of demonstrations.

pub mod analysis;
pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod losses;
pub mod models;
pub mod nn;
pub mod policy;
pub mod prompting;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
