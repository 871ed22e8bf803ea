//! Laplacian Units for point-cloud networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`params`], [`checkpoint`]: a small dense
//!   tensor engine with a reverse-mode tape and a named parameter store.
//! - [`geometry`]: kNN, farthest point sampling, voxel downsampling and
//!   inverse-distance interpolation.
//! - [`laplace`]: the umbrella operator, filter decomposition, mean
//!   curvature flow and curvature probes.
//! - [`layers`]: Laplacian Unit, KPConv-DS, MLPs and the bottleneck block.
//! - [`networks`]: the five-stage encoder with classification and
//!   segmentation heads.
//! - [`training`], [`data_io`], [`experiment`]: optimization and metrics,
//!   point-cloud files and synthetic data, end-to-end runs.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root name both instantiations. Tests check identities in
//! `f64`; training defaults to `f32`.

pub mod autodiff;
pub mod checkpoint;
pub mod data_io;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod laplace;
pub mod layers;
pub mod networks;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type PointCloud64 = geometry::PointCloud<f64>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type CurvatureReport64 = laplace::CurvatureReport<f64>;
pub type Network64 = networks::Network<f64>;
pub type Network32 = networks::Network<f32>;
