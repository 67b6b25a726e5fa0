//! Viscosity solutions of finite-horizon Hamilton–Jacobi–Bellman equations
//! by policy iteration on a vanishing-viscosity semi-discrete scheme.
//!
//! Each policy-evaluation step solves a *linear* PDE
//!
//! ```text
//! ∂t V + L(t,x,u) + ∇ʰV · f(t,x,u) + N h ΔʰV = 0,   V(T,·) = g
//! ```
//!
//! either with a physics-informed operator network ([`deeponet`]) that maps
//! terminal functions `g` to value functions, or on a dense grid
//! ([`grid`]) as a reference. Policies are improved pointwise by minimizing
//! the Hamiltonian against the central-difference gradient ([`ocp`],
//! [`stencil`]). Trajectory optimization by direct transcription
//! ([`transcription`]) and the Hopf–Lax formula provide independent
//! reference values.

pub mod bench;
pub mod config;
pub mod deeponet;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod nn;
pub mod ocp;
pub mod policy;
pub mod sampling;
pub mod stencil;
pub mod transcription;

pub use error::{Error, Result};
