//! Desk-scale laboratory for multi-view self-supervised representation
//! learning.
//!
//! The crate has two halves. The exact half works on finite joint
//! distributions: [`info`] computes entropies and mutual information,
//! [`repr`] enumerates every deterministic encoding of a small input
//! alphabet to find the optimal supervised and self-supervised
//! representations and check the information chains they satisfy, and
//! [`bounds`] evaluates the Bayes-error bounds. The learning half trains
//! small MLP encoders ([`nn`]) with the contrastive and predictive
//! objectives in [`objectives`] on synthetic multi-view data from
//! [`datagen`], and scores them with the protocols in [`eval`].

pub mod bounds;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod info;
pub mod nn;
pub mod objectives;
pub mod repr;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use info::{Alphabet, JointTable};
