//! Exit-location asymptotics for small-noise diffusions near a repelling
//! equilibrium.
//!
//! The crate pairs three independent views of the same exit problem
//!
//! ```text
//! dX = b(X) dt + ε σ(X) dW,    X_0 = ε ξ₀,    τ = inf{t > 0 : X_t ∉ D}
//! ```
//!
//! * [`predict`] evaluates the ε → 0 limit objects (exponent ladder, limit
//!   covariance, χ± weights, limit measure μ) by deterministic quadrature,
//! * [`sde`] runs a batched Euler–Maruyama exit simulator with
//!   thread-count-invariant random streams,
//! * [`stats`] compares the two (power-law fits, goodness of fit).
//!
//! [`flow`] supplies the deterministic Poincaré maps used to move between the
//! domain boundary and the small box of the linearizing chart, and
//! [`experiment`] drives ε-ladder campaigns described by a [`config`] file.
//!
//! Coordinates and axes are zero-based in the API. Files and printed output
//! use one-based axes and indices.

pub mod config;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod flow;
pub mod model;
pub mod predict;
pub mod quadrature;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{Domain, Drift, FaceRect, FaceSide, Interval, Model, SystemSpec, Target, TargetSet};
