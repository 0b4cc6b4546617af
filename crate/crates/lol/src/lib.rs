//! Low-rank adapter weights as a data type.
//!
//! A LoRA update is an ordered list of factor pairs `(U_i, V_i)` whose
//! dense products `U_i V_i^T` are what the adapted model actually sees.
//! Any invertible `R` maps `(U, V)` to the functionally identical
//! `(U R, V R^{-T})`, so models that consume raw factors must either be
//! invariant to that gauge or pay for it in generalization.
//!
//! This crate provides:
//!
//! - [`numerics`]: deterministic small-matrix linear algebra (QR, Jacobi
//!   SVD, orthogonal Procrustes, seeded group-element sampling);
//! - [`lora`]: the update data model, group actions, and the
//!   functional-equality oracle;
//! - [`featurize`]: four featurizations feeding a generic predictor —
//!   raw flattening, orthogonal alignment to templates, singular-value
//!   features, and explicit dense products;
//! - [`glnet`]: an end-to-end gauge-invariant network built from
//!   equivariant linear layers, an equivariant nonlinearity, and a
//!   matrix-product head, with exact gradients;
//! - [`learn`]: a small MLP, adaptive-moment training, and metrics;
//! - [`synth`]: seeded synthetic task generation with gauge-invariant
//!   teacher functions;
//! - [`verify`]: independent oracles and runnable property suites;
//! - [`container`]: bit-exact binary containers for updates, features,
//!   and checkpoints, plus JSON manifests;
//! - [`cli`]: the `lol` command-line front end.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability.

pub mod bench;
pub mod cli;
pub mod container;
pub mod error;
pub mod featurize;
pub mod glnet;
pub mod learn;
pub mod lora;
pub mod numerics;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use lora::{act, functionally_equal, GroupElement, LoraUpdate, TaskDataset};
pub use numerics::Matrix;
