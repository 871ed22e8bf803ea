//! Depthwise-separable kernel point convolution.
//!
//! Each (center, neighbor) pair gets the feature `[x_j ; p_j - p_i ; |p_j - p_i|]`,
//! which a shared MLP lifts to the output width. The lifted features are then
//! aggregated channel by channel, weighted by the linear correlation between
//! the relative position and a rigid set of kernel points.

use std::sync::Arc;

use rand::Rng;

use super::{uniform, Mlp};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::{self, NeighborIndex, Point};
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_KERNEL_POINTS: usize = 15;

const REPULSION_ITERS: usize = 200;

/// Rigid kernel layout in the local frame of a center point.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPoints {
    offsets: Vec<[f64; 3]>,
    sigma: f64,
}

impl KernelPoints {
    /// One point at the origin and `count - 1` spread over the sphere of radius `radius`.
    ///
    /// The shell starts from a Fibonacci lattice and is relaxed by a fixed
    /// number of inverse-square repulsion steps, so the layout is deterministic.
    /// The influence radius equals `radius`.
    pub fn new(count: usize, radius: f64) -> Result<Self> {
        if count == 0 || !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Config(format!(
                "kernel needs at least one point and a positive radius, got {count} and {radius}"
            )));
        }
        let mut offsets = vec![[0.0; 3]];
        offsets.extend(sphere_points(count - 1).into_iter().map(|p| p.map(|c| c * radius)));
        Ok(Self {
            offsets,
            sigma: radius,
        })
    }

    /// Explicit layout; offsets must be pairwise distinct.
    pub fn from_offsets(offsets: Vec<[f64; 3]>, sigma: f64) -> Result<Self> {
        if offsets.is_empty() || !(sigma > 0.0) {
            return Err(Error::Config("kernel needs points and a positive sigma".into()));
        }
        for (a, pa) in offsets.iter().enumerate() {
            if offsets[..a].contains(pa) {
                return Err(Error::Config(format!("duplicate kernel point {pa:?}")));
            }
        }
        Ok(Self { offsets, sigma })
    }

    pub fn offsets(&self) -> &[[f64; 3]] {
        &self.offsets
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

fn sphere_points(n: usize) -> Vec<[f64; 3]> {
    if n == 0 {
        return Vec::new();
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect();
    for _ in 0..REPULSION_ITERS {
        let forces: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let mut f = [0.0; 3];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let d = geometry::sub(&pts[i], &pts[j]);
                    let r2 = geometry::dist2(&pts[i], &pts[j]).max(1e-12);
                    let s = 1.0 / (r2 * r2.sqrt());
                    for c in 0..3 {
                        f[c] += d[c] * s;
                    }
                }
                f
            })
            .collect();
        for (p, f) in pts.iter_mut().zip(&forces) {
            for c in 0..3 {
                p[c] += 0.01 * f[c];
            }
            let r = geometry::norm(p);
            p.iter_mut().for_each(|c| *c /= r);
        }
    }
    pts
}

/// Per-pair relative geometry for one neighborhood table.
///
/// Row `i·k + j` holds `[p_j - p_i ; |p_j - p_i|]` for the `j`-th neighbor of query `i`.
#[derive(Clone, Debug)]
pub struct PairGeometry<T> {
    nbr: NeighborIndex,
    rel: Tensor<T>,
    sum_index: Arc<[usize]>,
}

impl<T: Scalar> PairGeometry<T> {
    pub fn new(query: &[Point<T>], source: &[Point<T>], nbr: NeighborIndex) -> Result<Self> {
        if nbr.len() != query.len() || nbr.n_source() != source.len() {
            return Err(Error::Shape {
                op: "pair geometry",
                left: vec![query.len(), source.len()],
                right: vec![nbr.len(), nbr.n_source()],
            });
        }
        let k = nbr.k();
        let mut rel = Vec::with_capacity(query.len() * k * 4);
        for (i, q) in query.iter().enumerate() {
            for &j in nbr.row(i) {
                let d = geometry::sub(&source[j], q);
                rel.extend_from_slice(&d);
                rel.push(geometry::norm(&d));
            }
        }
        let m = query.len() * k;
        Ok(Self {
            rel: Tensor::new(vec![m, 4], rel)?,
            sum_index: (0..m).collect(),
            nbr,
        })
    }

    /// Stacks the pair tables of independent clouds into one batch table.
    pub fn concat(parts: &[&PairGeometry<T>]) -> Result<Self> {
        let nbr = NeighborIndex::concat(&parts.iter().map(|p| &p.nbr).collect::<Vec<_>>())?;
        let rel: Vec<T> = parts.iter().flat_map(|p| p.rel.data().iter().copied()).collect();
        let m = rel.len() / 4;
        Ok(Self {
            rel: Tensor::new(vec![m, 4], rel)?,
            sum_index: (0..m).collect(),
            nbr,
        })
    }

    pub fn neighbors(&self) -> &NeighborIndex {
        &self.nbr
    }

    pub fn relative(&self) -> &Tensor<T> {
        &self.rel
    }

    /// Mean pair distance, a natural kernel radius for this neighborhood scale.
    pub fn mean_distance(&self) -> T {
        let m = self.rel.rows();
        if m == 0 {
            return T::zero();
        }
        self.rel.data().chunks(4).map(|r| r[3]).sum::<T>() / cast(m as f64)
    }

    /// Linear correlation table, `pairs × K`.
    pub fn correlation(&self, offsets: &Tensor<T>, sigma: T) -> Tensor<T> {
        let kk = offsets.rows();
        let m = self.rel.rows();
        let mut data = Vec::with_capacity(m * kk);
        for r in self.rel.data().chunks(4) {
            let u = [r[0], r[1], r[2]];
            for q in offsets.data().chunks(3) {
                let d = geometry::dist2(&u, &[q[0], q[1], q[2]]).sqrt();
                data.push((T::one() - d / sigma).max(T::zero()));
            }
        }
        Tensor::new(vec![m, kk], data).expect("pairs×K")
    }
}

#[derive(Clone, Debug)]
pub struct KpConvDs {
    d_in: usize,
    d_out: usize,
    mlp: Mlp,
    depthwise: ParamId,
    kernel_offsets: ParamId,
    kernel_sigma: ParamId,
}

impl KpConvDs {
    /// `mlp_depth` shared layers lift the `d_in + 4` pair features to `d_out`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        kernel: &KernelPoints,
        mlp_depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if mlp_depth == 0 {
            return Err(Error::Config("KPConv-DS needs at least one MLP layer".into()));
        }
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), d_in + 4, &vec![d_out; mlp_depth], true, rng);
        let kk = kernel.len();
        let depthwise = store.add_param(
            format!("{prefix}.depthwise"),
            uniform(rng, &[kk, d_out], 1.0 / (kk as f64).sqrt()),
        );
        let offsets = Tensor::from_f64(
            &[kk, 3],
            &kernel.offsets().iter().flatten().copied().collect::<Vec<_>>(),
        )?;
        let kernel_offsets = store.add_buffer(format!("{prefix}.kernel_offsets"), offsets);
        let kernel_sigma = store.add_buffer(format!("{prefix}.kernel_sigma"), Tensor::full(&[1], cast(kernel.sigma())));
        Ok(Self {
            d_in,
            d_out,
            mlp,
            depthwise,
            kernel_offsets,
            kernel_sigma,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn depthwise(&self) -> ParamId {
        self.depthwise
    }

    pub fn kernel_offsets(&self) -> ParamId {
        self.kernel_offsets
    }

    pub fn kernel_sigma(&self) -> ParamId {
        self.kernel_sigma
    }

    pub fn num_kernel_points<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.kernel_offsets).rows()
    }

    pub fn num_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.mlp.num_params() + store.value(self.depthwise).len()
    }

    /// `x` holds source features (`n_source × d_in`); returns `n_query × d_out`.
    pub fn forward<'a, T: Scalar>(
        &self,
        f: &Forward<'a, T>,
        x: Var<'a, T>,
        geom: &PairGeometry<T>,
    ) -> Result<Var<'a, T>> {
        let shape = x.shape();
        let nbr = geom.neighbors();
        if shape.len() != 2 || shape[1] != self.d_in || shape[0] != nbr.n_source() {
            return Err(Error::Shape {
                op: "kpconv_ds",
                left: shape,
                right: vec![nbr.n_source(), self.d_in],
            });
        }
        let pairs = x.gather_rows(nbr.shared())?;
        let aug = f.tape().concat_cols(&[pairs, f.constant(geom.relative().clone())])?;
        let h = self.mlp.forward(f, aug)?;
        let store = f.store();
        let sigma = store.value(self.kernel_sigma).data()[0];
        let corr = geom.correlation(store.value(self.kernel_offsets), sigma);
        let weights = f.constant(corr).matmul(f.param(self.depthwise))?;
        let ones: Arc<[T]> = vec![T::one(); geom.sum_index.len()].into();
        weights.mul(h)?.weighted_gather(geom.sum_index.clone(), ones, nbr.k())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_layout_is_deterministic_and_spread() {
        let a = KernelPoints::new(15, 0.5).unwrap();
        let b = KernelPoints::new(15, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.offsets()[0], [0.0; 3]);
        for p in &a.offsets()[1..] {
            assert!((geometry::norm(p) - 0.5).abs() < 1e-12);
        }
        let mut min = f64::MAX;
        for i in 0..15 {
            for j in 0..i {
                min = min.min(geometry::dist2(&a.offsets()[i], &a.offsets()[j]).sqrt());
            }
        }
        assert!(min > 0.2, "closest kernel points {min}");
    }

    #[test]
    fn correlation_clips_and_peaks() {
        let pos: Vec<Point<f64>> = vec![[0.0; 3], [5.0, 0.0, 0.0]];
        let nbr = NeighborIndex::new(vec![0, 1], 2, 2).unwrap();
        let geom = PairGeometry::new(&pos[..1], &pos, nbr).unwrap();
        let k = KernelPoints::new(1, 1.0).unwrap();
        let offs = Tensor::from_f64(&[1, 3], &[0.0, 0.0, 0.0]).unwrap();
        let c = geom.correlation(&offs, k.sigma());
        assert_eq!(c.data(), &[1.0, 0.0]);
    }
}
