//! Parametric hierarchical kernel matrices with tensor-train compressed
//! coupling and near-field tensors.
//!
//! `no_std` with `alloc`; the `std` feature only enables std-dependent
//! conveniences and `parallel` enables block-parallel loops.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod aca;
pub mod baselines;
pub mod chebyshev;
pub mod error;
pub mod farfield;
pub mod geometry;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod nearfield;
pub mod par;
pub mod phmatrix;
pub mod special;
pub mod tt;

pub use error::{Error, Result};
