//! Item-wise sharpness-aware training for long-tail next-item recommendation.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: interaction logs, prefix→target sequences, item frequencies,
//!   head/tail partition, chronological splits and a seeded Zipf generator.
//! - [`model`]: a mean-pooled embedding recommender with closed-form
//!   softmax cross-entropy gradients and a finite-difference oracle.
//! - [`weighting`]: frequency-dependent item weights `f(q)`.
//! - [`optimizers`]: plain, re-weighted, SAM, GroupSAM and EISAM steps on top
//!   of SGD or Adam, plus the seeded training loop.
//! - [`analysis`]: Hessian-vector products, Hutchinson traces, loss-landscape
//!   slices, item-wise sharpness and the generalization-bound calculator.
//! - [`eval`]: NDCG@K / HR@K with head/tail breakdown and the multi-seed
//!   experiment driver.

pub mod analysis;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod optimizers;
pub mod rng;
pub mod weighting;

pub use error::{Error, Result};
