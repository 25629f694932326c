//! Noise spectroscopy for shallow two-level spin sensors.
//!
//! Forward direction: a parametric noise spectrum and a dynamical-decoupling
//! sequence give the decay exponent `chi(t)` ([`filter`]), or Monte-Carlo
//! coherence from Ornstein-Uhlenbeck bath trajectories ([`bath`]).
//!
//! Inverse direction: coherence curves are fitted to stretched exponentials,
//! the coherence time is tracked against pulse number, and spectral
//! decomposition turns every `(N, t, C)` point into a sample of the spectrum
//! ([`decomposition`]). Parametric models are then fitted to those samples,
//! jointly across sensors with shared correlation times, and the couplings are
//! regressed against sensor depth ([`fitting`]). The proton NMR feature fixes
//! each sensor's depth ([`depth`]).

pub mod bath;
pub mod config;
pub mod dataset;
pub mod decomposition;
pub mod depth;
pub mod error;
pub mod filter;
pub mod fitting;
pub mod nls;
pub mod noise_model;
pub mod pipeline;
pub mod plots;
pub mod quadrature;
pub mod units;

pub use error::{Error, Result};
