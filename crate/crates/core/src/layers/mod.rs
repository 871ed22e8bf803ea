//! Learned building blocks.
//!
//! Layers are plain structs holding [`ParamId`](crate::params::ParamId)s into a
//! [`ParamStore`](crate::params::ParamStore); their forward methods are generic
//! over the scalar type and record onto the tape of a
//! [`Forward`](crate::params::Forward) context.

mod bottleneck;
mod kpconv;
mod lu;
mod mlp;
mod norm;

pub use bottleneck::Bottleneck;
pub use kpconv::{KernelPoints, KpConvDs, PairGeometry, DEFAULT_KERNEL_POINTS};
pub use lu::{Fusion, LaplacianUnit, LuConfig};
pub use mlp::{Linear, Mlp};
pub use norm::{BatchNorm, BN_EPS, BN_MOMENTUM};

use rand::Rng;

use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Uniform `[-bound, bound]` matrix drawn in `f64` so every scalar type sees the same values.
pub(crate) fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| cast(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}
