//! Conditional transformation flow
//! `z = f3(f2(sigmoid(f1(y))))` with `f1: y -> a*y - b`, `f2` a Bernstein
//! polynomial with increasing coefficients and `f3: h -> alpha*h - beta`.
//!
//! [`TransformParams`] holds one instance of the chain; the free functions
//! ([`transform`], [`log_density`], [`cdf`], [`quantile`], [`sample`]) act on
//! it. [`DeepTransformModel`] emits these parameters from three small
//! networks, [`LinearTransformModel`] is the linear-shift baseline.

mod base;
mod model;
mod network;
mod params;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::bernstein::BernsteinError;

pub use base::BaseDistribution;
pub use model::{
    batch_log_density, ltm_transform, AnyModel, DeepTransformModel, DensityModel, DensityNodes,
    LinearTransformModel, LtmParams, ModelConfig, ModelKind, ParamGroup,
};
pub use network::{Activation, Dense, Mlp};
pub use params::{
    cdf, floored_slope_count, invert, log_density, quantile, sample, transform, Samples,
    TransformParams, SLOPE_FLOOR,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Bernstein(#[from] BernsteinError),
    #[error("invalid transformation parameters: {0}")]
    InvalidParams(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input has {got} columns, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite {term} ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("target z = {target_z} outside the attainable range ({z_lo}, {z_hi})")]
    OutOfSupport { target_z: f64, z_lo: f64, z_hi: f64 },
    #[error("probability {0} must lie strictly between 0 and 1")]
    InvalidProbability(f64),
    #[error("could not bracket z = {target_z} within 200 doublings")]
    BracketFailed { target_z: f64 },
}
