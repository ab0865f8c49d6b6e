//! Split-step Fourier solvers for the nonlinear Schrödinger equation driven by
//! multiplicative Lévy noise in Marcus form, with tools for the associated
//! skeleton equation, entropy costs and small-noise rare-event experiments.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod noise;
pub mod rng;
pub mod spectral;
pub mod wong_zakai;

pub use coefficients::{NonlinearitySpec, Profile, SaturableFamily};
pub use control::Control;
pub use dynamics::{SolverConfig, Trajectory};
pub use error::{Error, Result};
pub use noise::{JumpEvent, LevyMeasure};
pub use spectral::{ComplexField, Representation, SpectralGrid};
