//! Density uniformization through a scalar potential.
//!
//! Given a discretized 2-D density `p`, the solver finds a potential `g` whose
//! gradient field `f = grad g` moves the density to the uniform distribution:
//! the map `x -> x + grad g(x)` satisfies `p/u = |I + H(g)|`. The potential is
//! found by minimizing the squared residual of that determinant equation with
//! nonlinear conjugate gradients, coarse to fine.

pub mod diffops;
pub mod error;
pub mod grid;
pub mod multigrid;
pub mod optimizer;
pub mod pde;
pub mod reference;
pub mod transport;

pub use error::{Error, Result};
