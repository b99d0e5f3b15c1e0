//! Linear algebra kernels: sparse storage, banded quasi-definite LDLᵀ,
//! bandwidth-reducing ordering and dense Bunch-Kaufman factorization.

pub mod band;
pub mod bunch_kaufman;
pub mod ordering;
pub mod sparse;

pub use band::{factor_band, BandLdl, BandMatrix};
pub use bunch_kaufman::{BunchKaufman, Inertia};
pub use ordering::{bandwidth, reverse_cuthill_mckee};
pub use sparse::SparseMatrix;
