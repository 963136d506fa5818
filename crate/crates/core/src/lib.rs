//! Deep conditional transformation models.
//!
//! A scalar outcome `y` is mapped to a standard normal `z` through a chain of
//! monotone transformations whose parameters are emitted by small networks
//! conditioned on the input `x`. The change-of-variables formula gives exact
//! conditional densities, so training is plain maximum likelihood.

pub mod autodiff;
pub mod bernstein;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod flow;
pub mod training;
