//! Local identifiability of fully-connected ReLU networks from a finite
//! sample.
//!
//! The crate lifts network parameters to path space, builds the restricted
//! parameterization that removes rescaling invariance, computes the
//! Jacobian `Gamma(X, theta)` and the ranks `R_Gamma`, `R_A`, and turns them
//! into a three-valued verdict. The [`oracle`] module holds independent
//! checks (finite differences, exact rational arithmetic, flatness probes,
//! continuation) used to validate every computation.

pub mod charts;
pub mod error;
pub mod identifiability;
pub mod io;
pub mod linalg;
pub mod network;
pub mod oracle;
pub mod pathspace;
pub mod rescaling;
pub mod scalar;

pub use charts::{build_chart, embed, restricted_from, ChartContext, RestrictedParams};
pub use error::{Error, Result};
pub use identifiability::{evaluate, evaluate_params, EvaluateOptions, IdentifiabilityReport, Verdict};
pub use linalg::RankPolicy;
pub use network::{forward, Architecture, NetworkParams};
pub use pathspace::{enumerate_paths, lift, PathEnumeration, DEFAULT_PATH_CAP};
