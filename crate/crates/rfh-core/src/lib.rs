//! Critical points, flow lines and mod-2 homology for strongly indefinite
//! constrained variational problems on finite spectral truncations.
//!
//! The engine works in an E-orthonormal eigenbasis of a self-adjoint operator
//! with spectrum unbounded in both directions: it locates critical points of
//! the constrained action ½⟨Lu,u⟩ − λF(u) for starshaped potentials F, grades
//! them by relative index against H⁻ × ℝ, counts connecting orbits of the
//! descending metric gradient flow mod 2, assembles plain and equivariant
//! chain complexes, computes homology over ℤ₂, and builds continuation maps
//! between potentials.

mod collocation;
pub mod complexes;
pub mod continuation;
pub mod critical;
pub mod error;
pub mod functional;
pub mod grading;
pub mod kernel_reduction;
pub mod orbits;
pub mod pipeline;
pub mod potentials;
pub mod spectrum;

mod serde_dvector;

pub use error::{Error, Result};
