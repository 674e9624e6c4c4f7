//! Clustered Lippmann-Schwinger homogenization in 1D and learned interaction
//! operators.
//!
//! - [`grid`]: periodic domains, cell-centered grids, field containers
//! - [`ls`]: full-field periodic Lippmann-Schwinger solver and its closed form
//! - [`sca`]: k-means reduced-order model (offline clustering, interaction
//!   tensor, online clustered solve)
//! - [`smoothing`]: tanh surrogate of piecewise-constant fields
//! - [`kernels`]: Gram matrices, PSD checks, Mercer and primal/dual OLS
//! - [`autodiff`]: reverse-mode engine and Adam
//! - [`gkn`]: graph kernel network on cluster centroids
//! - [`spectral`]: DFT utilities and the Fourier layer

pub mod autodiff;
pub mod data;
pub mod error;
pub mod exec;
pub mod gkn;
pub mod grid;
pub mod kernels;
pub mod linalg;
pub mod ls;
pub mod sca;
pub mod smoothing;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
