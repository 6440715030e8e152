//! Simulator for sensing-assisted multiuser downlink through a simultaneously
//! transmitting and reflecting surface (STARS).
//!
//! A base station sends precoded data streams plus a dedicated sensing
//! waveform through the surface. The refracted half serves communication
//! users; the reflected half illuminates a target whose echo is collected by
//! a sensor array mounted at the surface. The crate provides
//!
//! * array geometry, steering vectors, and Rician channel generation,
//! * the Fisher information matrix and Cramer-Rao bound of the two
//!   direction-of-arrival angles,
//! * a dense primal-dual interior-point solver for the semidefinite
//!   subproblems,
//! * block-coordinate waveform and surface-coefficient updates wrapped in a
//!   penalty dual decomposition driver, for both independent and coupled
//!   phase-shift models,
//! * a maximum-likelihood grid estimator used to validate the bound,
//! * a sweep/experiment harness behind the `stars-isac` binary.

pub mod channel;
pub mod config;
pub mod conic;
pub mod experiment;
pub mod fim;
pub mod geometry;
pub mod linalg;
pub mod mle;
pub mod pdd;
pub mod stars;
pub mod validate;
pub mod waveform;

pub use config::SystemConfig;
