//! Fixed (non-learned) Laplacian machinery on point neighborhoods.
//!
//! A neighborhood filter `x_i' = Σ_j w_ij x_j` splits exactly into a global
//! part `Σ_j w_ij x_i` and a local part `Σ_j w_ij (x_j - x_i)`. With uniform
//! weights the local part is the umbrella operator, the negated discrete
//! Laplacian, whose explicit integration is mean curvature flow.

use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::{knn_self, positions_tensor, NeighborIndex, Point};
use crate::scalar::{cast, count, Scalar};
use crate::tensor::Tensor;

/// Per-neighbor filter weights aligned with a [`NeighborIndex`].
#[derive(Clone, Debug, PartialEq)]
pub struct FilterWeights<T> {
    weights: Vec<T>,
    k: usize,
}

impl<T: Scalar> FilterWeights<T> {
    pub fn new(weights: Vec<T>, k: usize) -> Result<Self> {
        if k == 0 || weights.len() % k != 0 {
            return Err(Error::Shape {
                op: "filter weights",
                left: vec![weights.len()],
                right: vec![k],
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("non-finite filter weight".into()));
        }
        Ok(Self { weights, k })
    }

    /// Uniform `1/k` averaging filter.
    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            weights: vec![T::one() / count::<T>(k); n * k],
            k,
        }
    }

    /// Weights satisfy the convex-combination constraint within `tol`.
    pub fn is_convex(&self, tol: T) -> bool {
        self.weights.iter().all(|&w| w >= T::zero())
            && self
                .weights
                .chunks(self.k)
                .all(|r| (r.iter().copied().sum::<T>() - T::one()).abs() <= tol)
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn as_slice(&self) -> &[T] {
        &self.weights
    }
}

fn check_aligned<T: Scalar>(x: &Tensor<T>, nbr: &NeighborIndex, w: Option<&FilterWeights<T>>) -> Result<usize> {
    let (n, d) = x.expect_matrix("neighborhood filter")?;
    if nbr.len() != n || nbr.n_source() != n {
        return Err(Error::Shape {
            op: "neighborhood filter",
            left: vec![n, d],
            right: vec![nbr.len(), nbr.k()],
        });
    }
    if let Some(w) = w {
        if w.k() != nbr.k() || w.as_slice().len() != nbr.flat().len() {
            return Err(Error::Shape {
                op: "filter weights",
                left: vec![nbr.len(), nbr.k()],
                right: vec![w.as_slice().len() / w.k().max(1), w.k()],
            });
        }
    }
    Ok(d)
}

/// `x_i' = Σ_j w_ij x_j`.
pub fn convolve_plain<T: Scalar>(x: &Tensor<T>, nbr: &NeighborIndex, w: &FilterWeights<T>) -> Result<Tensor<T>> {
    let d = check_aligned(x, nbr, Some(w))?;
    let mut out = Tensor::zeros(&[nbr.len(), d]);
    for i in 0..nbr.len() {
        let row = out.row_mut(i);
        for (&j, &wij) in nbr.row(i).iter().zip(w.row(i)) {
            for (o, &v) in row.iter_mut().zip(x.row(j)) {
                *o += wij * v;
            }
        }
    }
    Ok(out)
}

/// `x_i' = Σ_j w_ij x_i + Σ_j w_ij (x_j - x_i)`, evaluated term by term.
pub fn convolve_decomposed<T: Scalar>(
    x: &Tensor<T>,
    nbr: &NeighborIndex,
    w: &FilterWeights<T>,
) -> Result<Tensor<T>> {
    let d = check_aligned(x, nbr, Some(w))?;
    let mut out = Tensor::zeros(&[nbr.len(), d]);
    for i in 0..nbr.len() {
        let xi = x.row(i);
        let wsum: T = w.row(i).iter().copied().sum();
        let mut local = vec![T::zero(); d];
        for (&j, &wij) in nbr.row(i).iter().zip(w.row(i)) {
            for ((l, &xj), &xi) in local.iter_mut().zip(x.row(j)).zip(xi) {
                *l += wij * (xj - xi);
            }
        }
        for ((o, &xi), l) in out.row_mut(i).iter_mut().zip(xi).zip(local) {
            *o = wsum * xi + l;
        }
    }
    Ok(out)
}

/// Umbrella operator: `(1/|N(i)|) Σ_j (x_j - x_i)`, the negated discrete Laplacian.
pub fn umbrella<T: Scalar>(x: &Tensor<T>, nbr: &NeighborIndex) -> Result<Tensor<T>> {
    let d = check_aligned(x, nbr, None)?;
    let inv = T::one() / count::<T>(nbr.k());
    let mut out = Tensor::zeros(&[nbr.len(), d]);
    for i in 0..nbr.len() {
        let xi = x.row(i).to_vec();
        let row = out.row_mut(i);
        for &j in nbr.row(i) {
            for ((o, &xj), &xi) in row.iter_mut().zip(x.row(j)).zip(&xi) {
                *o += xj - xi;
            }
        }
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Mean of each neighborhood, `(1/|N(i)|) Σ_j x_j`.
pub fn neighborhood_mean<T: Scalar>(x: &Tensor<T>, nbr: &NeighborIndex) -> Result<Tensor<T>> {
    convolve_plain(x, nbr, &FilterWeights::uniform(nbr.len(), nbr.k()))
}

/// One explicit Euler step `p <- p + step * umbrella(p)` on fixed neighborhoods.
pub fn flow_step<T: Scalar>(positions: &[Point<T>], nbr: &NeighborIndex, step: T) -> Result<Vec<Point<T>>> {
    let lap = umbrella(&positions_tensor(positions), nbr)?;
    Ok(positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let l = lap.row(i);
            [p[0] + step * l[0], p[1] + step * l[1], p[2] + step * l[2]]
        })
        .collect())
}

/// Default flow step size.
pub const DEFAULT_FLOW_STEP: f64 = 0.5;

/// Explicit mean curvature flow; self-inclusive kNN neighborhoods are rebuilt
/// from the current positions before every step.
pub fn mean_curvature_flow<T: Scalar>(
    positions: &[Point<T>],
    k: usize,
    step: T,
    iterations: usize,
) -> Result<Vec<Point<T>>> {
    let mut current = positions.to_vec();
    for _ in 0..iterations {
        let nbr = knn_self(&current, k)?;
        current = flow_step(&current, &nbr, step)?;
    }
    Ok(current)
}

/// Per-point curvature magnitudes around one LU application.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureReport<T> {
    pub h_in: Vec<T>,
    pub h_out: Vec<T>,
    pub h_delta: Vec<T>,
}

fn row_norms<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

/// `h_in = ‖umbrella(x_in)‖`, `h_out = ‖umbrella(x_out)‖`, `h_delta = ‖delta‖` per point.
pub fn curvature_probe<T: Scalar>(
    x_in: &Tensor<T>,
    x_out: &Tensor<T>,
    delta: &Tensor<T>,
    nbr: &NeighborIndex,
) -> Result<CurvatureReport<T>> {
    if x_in.shape() != x_out.shape() || x_in.shape() != delta.shape() {
        return Err(Error::Shape {
            op: "curvature_probe",
            left: x_in.shape().to_vec(),
            right: if x_in.shape() != x_out.shape() {
                x_out.shape().to_vec()
            } else {
                delta.shape().to_vec()
            },
        });
    }
    Ok(CurvatureReport {
        h_in: row_norms(&umbrella(x_in, nbr)?),
        h_out: row_norms(&umbrella(x_out, nbr)?),
        h_delta: row_norms(delta),
    })
}

impl<T: Scalar> CurvatureReport<T> {
    pub fn len(&self) -> usize {
        self.h_in.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_in.is_empty()
    }

    /// Tab-separated table: `index  h_in  h_out  h_delta`, one row per point.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index\th_in\th_out\th_delta")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{}\t{:e}\t{:e}\t{:e}",
                i, self.h_in[i], self.h_out[i], self.h_delta[i]
            )?;
        }
        Ok(())
    }
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * cast(0.5)
    })
}
