//! Joint law of a drifted unit diffusion and the running supremum of its
//! first coordinate.
//!
//! The crate computes the density `p(m, x; t)` of `(M_t, X_t)` where
//! `dX = B(X) dt + dW` and `M_t = sup_{s ≤ t} X¹_s`, through three routes that
//! check each other:
//!
//! * closed-form Brownian (and constant-drift) laws in [`brownian`],
//! * a parametrix fixed-point solver for general bounded drifts in [`parametrix`],
//! * a bridge-corrected Monte Carlo engine in [`mc`].
//!
//! [`verify`] checks candidate densities against the weak PDE with its
//! diagonal boundary term and runs the uniqueness diagnostics built on the
//! Feynman–Kac dual semigroup of [`dual`].
//!
//! The crate is `no_std` with `alloc` when the default `std` feature is
//! disabled; `parallel` enables rayon work splitting, which never changes
//! results.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod brownian;
pub mod dual;
pub mod error;
pub mod kernels;
pub mod mc;
pub mod model;
pub mod parallel;
pub mod parametrix;
pub mod pricing;
pub mod quad;
pub mod special;
pub mod verify;

pub use error::{Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Largest state dimension handled anywhere in the crate.
pub const MAX_DIM: usize = 3;

pub(crate) mod fmath {
    #[cfg(not(feature = "std"))]
    pub use num_traits::Float;
}
