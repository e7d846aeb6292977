//! Flow-matching sparse-view CT reconstruction with velocity reuse.
//!
//! The measurement model is a parallel-beam projector ([`geometry`]).
//! Reconstruction transports Gaussian noise along a learned or analytic
//! velocity field ([`velocity`]) with Euler steps, each followed by a
//! conjugate-gradient data-consistency correction ([`consistency`]).
//! [`sampler::efmct_reconstruct`] skips field evaluations while a residual
//! check keeps passing.

pub mod analysis;
pub mod consistency;
pub mod error;
pub mod geometry;
pub mod io;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod velocity;

pub use consistency::{cg_refine, dc_correction, residual, DcConfig};
pub use error::{Error, Result};
pub use geometry::{back_project, fbp, forward_project, make_geometry, Geometry, Image, Sinogram};
pub use phantom::{PhantomKind, PhantomSpec};
pub use sampler::{
    efmct_reconstruct, fmct_reconstruct, ReconResult, ResidualMode, SamplerConfig, SamplerTrace,
};
pub use velocity::{NeuralVelocity, VelocityField};
