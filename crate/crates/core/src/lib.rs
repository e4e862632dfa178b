//! End-to-end learning of per-input sub-ensembles of specialized agents.
//!
//! A selection network scores the agents for each input, a differentiable
//! top-k knapsack layer picks `k` of them, and a smoothed majority vote over
//! the picked agents is trained with cross-entropy. The crate is `no_std`
//! and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod ensemble;
mod error;
pub mod knapsack;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
