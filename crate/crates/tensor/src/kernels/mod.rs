//! Slice-level forward/backward kernels. The tape in [`crate::tape`] wires
//! these into a differentiable graph.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;
