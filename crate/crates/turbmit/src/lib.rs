//! Multi-frame turbulence mitigation.
//!
//! Reconstructs a single sharp image from a stack of frames degraded by
//! atmospheric or water turbulence, by fitting a physically faithful
//! tilt-then-blur forward model with an implicit image representation,
//! per-frame grid deformers, and per-frame shift-varying blur. The same
//! forward model doubles as a simulator that renders distorted stacks
//! from clean images.

pub mod autodiff;
pub mod cli;
pub mod fixtures;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod optics;
pub mod real;
pub mod trainer;
pub mod warp;

pub use real::Real;
