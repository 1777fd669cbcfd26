//! Exact simulation of a small quantum system coupled to an engineered finite
//! bath.
//!
//! The universe Hamiltonian `H = H_sys + g X ⊗ Y + H_bath` is assembled densely
//! in the joint energy eigenbasis of system and bath, diagonalized once, and
//! then used to propagate pure states on arbitrary time grids. The crate also
//! provides the thermal reference (Boltzmann populations), eigenstate
//! thermalization diagnostics, and the command-line pipeline that writes
//! CSV/JSON artifacts.
//!
//! Units: energies are multiples of `ħμ` with `ħ = μ = 1`; times are multiples
//! of `1/μ`; temperature enters only through `β`.
//!
//! Indices are 0-based. The joint index of system level `s` and bath level `b`
//! is `s * N + b`.

pub mod app;
pub mod bath;
pub mod error;
pub mod eth;
pub mod hashing;
pub mod model;
pub mod observables;
pub mod rng;
pub mod spectral;
pub mod universe;

pub use error::{Error, Result};
