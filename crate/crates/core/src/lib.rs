//! Weighted hybridizable discontinuous Galerkin (W-HDG) solvers for
//! stationary drift-diffusion problems
//!
//! ```text
//!     j + α ∇u − β u = 0   in Ω
//!              div j = f   in Ω
//! ```
//!
//! with Dirichlet and Neumann boundary data, on 1D interval grids and 2D
//! axis-aligned quadrilateral meshes. Cell inner products are weighted by the
//! local exponential `μ_K = exp(−β·(x − x_K)/α)`, which removes the drift term
//! from the flux equation while keeping `u` as the unknown.
//!
//! The crate is organized bottom-up:
//!
//! - [`mesh`]: interval grids, Cartesian quadrilateral meshes and the graded
//!   p-i-n benchmark grids.
//! - [`poly`]: orthonormal tensor Legendre bases and Raviart–Thomas bases.
//! - [`quadrature`]: plain and exponentially weighted Gauss rules.
//! - [`hdg`]: local solvers, static condensation onto the skeleton, the trace
//!   solve and volume recovery (weighted and standard HDG).
//! - [`sg`]: the Scharfetter–Gummel two-point finite volume scheme.
//! - [`postproc`]: local superconvergent postprocessing and flux reconstruction.
//! - [`harness`]: manufactured-solution convergence studies and the p-i-n
//!   thermodynamic-equilibrium benchmark.

pub mod error;
pub mod harness;
pub mod hdg;
pub mod linalg;
pub mod mesh;
pub mod poly;
pub mod postproc;
pub mod quadrature;
pub mod sg;

pub use error::{Error, Result};
