//! Parameter-independent affine tracking feedback for families of linear
//! systems with uncertain parameters.
//!
//! A single feedback is synthesized from a finite training ensemble by solving
//! a block-diagonal differential Riccati equation together with a linear
//! offset equation; it can then be applied to any member of the family and
//! compared with an averaged-parameter design and with the optimal feedback
//! for a known parameter.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod feedback;
mod linalg;
pub mod model;
pub mod pde1d;
pub mod riccati;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use linalg::{loglog_slope, Scheme};
