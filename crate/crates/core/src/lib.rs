//! Parametric Koopman decompositions learned from trajectory data.
//!
//! A state dictionary `Psi(x)` and a parameter-dependent lifted evolution
//! matrix `K(u)` are trained jointly so that `Psi(x_{n+1}) ~ K(u_n) Psi(x_n)`.
//! The learned pair is then used for multi-step prediction, receding-horizon
//! tracking control and a controllability rank diagnostic. The classical
//! baselines (DMD/EDMD, affine and bilinear control forms, polynomial
//! parameter expansions) live alongside for comparison.

pub mod control;
pub mod dictionary;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod koopman;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
