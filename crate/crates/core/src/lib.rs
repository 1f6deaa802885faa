//! Decentralized proximal-gradient optimization over undirected networks.
//!
//! The crate implements NIDS (network-independent step-sizes) together with
//! the EXTRA / PG-EXTRA and DIGing-ATC baselines, and the machinery needed to
//! check what the theory promises on concrete runs:
//!
//! - [`netgraph`]: graph generators, mixing matrices, validation, spectra.
//! - [`stackmat`]: the stacked `n × p` iterate algebra and the M-norm on
//!   `range(I − W)`.
//! - [`objectives`]: least-squares smooth terms, proximable terms, problem
//!   generators and centralized reference solvers.
//! - [`algorithms`]: single-iteration steppers sharing one state vocabulary.
//! - [`analysis`]: fixed-point certificates, Lyapunov values, rate bounds.
//! - [`harness`]: config-driven experiments and trace export.
//!
//! Stacked matrices carry one row per agent. Agent indices are 0-based in
//! every file format and 1-based in human-facing log messages.

pub mod algorithms;
pub mod analysis;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod netgraph;
pub mod objectives;
pub mod stackmat;

pub use error::{Error, Result};
