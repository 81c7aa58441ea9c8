//! Per-head adaptation and gating on a toy transformer.
//!
//! A frozen random encoder is adapted per head with head-aware LoRA on its
//! query and value projections, while learnable gates reweight head outputs
//! and are pulled toward domain invariance by a per-layer MMD penalty. All
//! math runs on a small double-precision tape ([`tape`]) so every gradient is
//! checkable against finite differences.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line
//! live in the `headpurify` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dig;
pub mod domainsynth;
pub mod encoder;
pub mod error;
pub mod halora;
pub mod headlab;
pub mod losses;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
