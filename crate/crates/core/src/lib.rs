//! Scattering and spectral numerics for half-line matrix Schrödinger
//! operators with energy-dependent coupling, plus the radial-mode and
//! pencil-resolvent diagnostics built on them.

pub mod error;
pub mod krein;
pub mod linalg;
pub mod ode;
pub mod potential;
pub mod quad;
pub mod radial;
pub mod resolvent;
pub mod scattering;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::{CMat, C64};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
