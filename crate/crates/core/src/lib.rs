//! Desk-scale engine for studying safety-preserving continual adaptation.
//!
//! A frozen toy base model is adapted across a sequence of synthetic
//! domains through low-rank adapters. Safety-critical parameter
//! directions are identified by Fisher eigendecomposition (SSI), domain
//! gradients are projected onto their orthogonal complement with adaptive
//! relaxation (OSCA), a forward-KL anchor pins the output distribution on
//! safety inputs, and a monitor triggers bounded corrective replay when
//! probe safety drops below a threshold (CSM).

// Index loops over matrix coordinates are the house style in the dense
// kernels; iterator rewrites obscure the math.
#![allow(clippy::needless_range_loop)]

pub mod analytics;
pub mod anchor;
pub mod csm;
pub mod error;
pub mod linalg;
pub mod model;
pub mod osca;
pub mod pipeline;
pub mod rng;
pub mod ssi;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{sym_eig, thin_svd, Matrix, SvdResult, SymEigResult};
pub use model::{AdapterLayer, AdapterModel, FlatAdapterVec, ModelArch};
pub use osca::{ProjectionMode, ProjectionPolicy};
pub use pipeline::{Method, RunConfig, RunLog};
pub use ssi::{CalibrationSet, SafetySubspace};
pub use tasks::{SuiteConfig, TaskSuite};
