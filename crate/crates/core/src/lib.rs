#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod capsules;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use tensor::{Tape, TensorError, Var};
