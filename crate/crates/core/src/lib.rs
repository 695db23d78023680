//! LS-MD estimation of random-coefficients logit demand with interactive
//! fixed effects.
//!
//! The crate is `no_std` (with `alloc`): every routine is a pure function of
//! its inputs. File formats, the command line and the parallel Monte Carlo
//! driver live in the `blp-ife` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dgp;
pub mod diagnostics;
pub mod elasticities;
pub mod error;
pub mod factor;
pub mod inference;
pub mod linalg;
pub mod lsmd;
pub mod montecarlo;
pub mod optim;
pub mod panel;
pub mod quadrature;
pub mod rng;
pub mod shares;
pub mod special;

pub use error::{Error, Result};
pub use panel::{PanelData, RandomCoeffSpec};
