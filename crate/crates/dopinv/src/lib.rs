//! Doping-profile reconstruction for a 2D unipolar semiconductor diode.
//!
//! The device occupies the square (-1,1)^2 with Ohmic contacts on the top
//! (GammaN) and bottom (GammaP) edges. The forward model is the linearized
//! drift-diffusion system close to equilibrium: a semilinear Poisson equation
//! for the equilibrium potential V_e and a linear continuity equation in the
//! Slotboom variable. Observations are noisy normal current densities at the
//! top contact. The inverse problem infers V_e under a Matern Gaussian prior
//! with a preconditioned Crank-Nicolson (pCN) sampler, then recovers the
//! doping profile C = delta^2 exp(V_e) - lambda^2 Laplacian(V_e) by finite
//! differences.

pub mod bessel;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod field;
pub mod forward;
pub mod io;
pub mod mcmc;
pub mod mesh;
pub mod prior;
pub mod reconstruct;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use field::{FieldRole, ScalarField};
pub use forward::{DeviceParams, Observation};
pub use mcmc::{Chain, NoiseModel, SamplerKind};
pub use mesh::Mesh;
pub use prior::{MaternParams, MaternPrior};
