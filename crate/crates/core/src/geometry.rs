//! Neighborhoods, downsampling and cross-resolution interpolation.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{cast, count, Scalar};
use crate::tensor::Tensor;

pub type Point<T> = [T; 3];

#[inline]
pub fn dist2<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn sub<T: Scalar>(a: &Point<T>, b: &Point<T>) -> Point<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm<T: Scalar>(a: &Point<T>) -> T {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn centroid<T: Scalar>(points: &[Point<T>]) -> Point<T> {
    let mut c = [T::zero(); 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let n = count::<T>(points.len().max(1));
    c.map(|v| v / n)
}

/// Total order on `(squared distance, index)` pairs; distances are finite.
#[inline]
fn by_dist<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// A point set at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub positions: Vec<Point<T>>,
    pub features: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    /// One-hot object category, used to condition part segmentation.
    pub object_class: Option<Vec<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(positions: Vec<Point<T>>, features: Tensor<T>) -> Result<Self> {
        let cloud = Self {
            positions,
            features,
            labels: None,
            object_class: None,
        };
        cloud.validate(None)?;
        Ok(cloud)
    }

    /// Cloud whose features are its own coordinates.
    pub fn from_positions(positions: Vec<Point<T>>) -> Result<Self> {
        let features = positions_tensor(&positions);
        Self::new(positions, features)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Shape {
                op: "labels",
                left: vec![self.len()],
                right: vec![labels.len()],
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.features.cols()
    }

    /// Checks the cloud invariants; `num_classes` bounds labels when given.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::InsufficientPoints {
                needed: 1,
                available: 0,
            });
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCloud("non-finite position".into()));
        }
        if self.features.rank() != 2 || self.features.rows() != self.len() {
            return Err(Error::Shape {
                op: "point features",
                left: vec![self.len()],
                right: self.features.shape().to_vec(),
            });
        }
        if let (Some(labels), Some(c)) = (&self.labels, num_classes) {
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::Label {
                    label: bad,
                    classes: c,
                });
            }
        }
        Ok(())
    }

    /// Subset of points in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let d = self.feature_width();
        let mut feats = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            feats.extend_from_slice(self.features.row(i));
        }
        Self {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            features: Tensor::new(vec![idx.len(), d], feats).expect("consistent widths"),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            object_class: self.object_class.clone(),
        }
    }
}

pub fn positions_tensor<T: Scalar>(positions: &[Point<T>]) -> Tensor<T> {
    Tensor::new(
        vec![positions.len(), 3],
        positions.iter().flat_map(|p| p.iter().copied()).collect(),
    )
    .expect("n×3")
}

/// Row-major `n×k` table of neighbor indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Arc<[usize]>,
    k: usize,
    n_source: usize,
}

impl NeighborIndex {
    pub fn new(indices: Vec<usize>, k: usize, n_source: usize) -> Result<Self> {
        if k == 0 || indices.len() % k != 0 {
            return Err(Error::Shape {
                op: "neighbor index",
                left: vec![indices.len()],
                right: vec![k],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_source) {
            return Err(Error::InsufficientPoints {
                needed: bad + 1,
                available: n_source,
            });
        }
        Ok(Self {
            indices: indices.into(),
            k,
            n_source,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of query rows.
    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    pub fn shared(&self) -> Arc<[usize]> {
        self.indices.clone()
    }

    /// Stacks tables of independent clouds, offsetting each by the preceding source counts.
    pub fn concat(parts: &[&NeighborIndex]) -> Result<Self> {
        let k = parts.first().map_or(1, |p| p.k);
        let mut out = Vec::with_capacity(parts.iter().map(|p| p.indices.len()).sum());
        let mut offset = 0;
        for p in parts {
            if p.k != k {
                return Err(Error::Shape {
                    op: "neighbor concat",
                    left: vec![k],
                    right: vec![p.k],
                });
            }
            out.extend(p.indices.iter().map(|&i| i + offset));
            offset += p.n_source;
        }
        Self::new(out, k, offset)
    }

    /// Same neighbor sets with each row reordered by `perm(row) -> new row`.
    pub fn map_rows(&self, mut f: impl FnMut(usize, &[usize]) -> Vec<usize>) -> Result<Self> {
        let mut out = Vec::with_capacity(self.indices.len());
        for i in 0..self.len() {
            let r = f(i, self.row(i));
            if r.len() != self.k {
                return Err(Error::Shape {
                    op: "neighbor row",
                    left: vec![self.k],
                    right: vec![r.len()],
                });
            }
            out.extend(r);
        }
        Self::new(out, self.k, self.n_source)
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InsufficientPoints {
            needed: k.max(1),
            available: n,
        });
    }
    Ok(())
}

fn k_smallest<T: Scalar>(cands: &mut Vec<(T, usize)>, k: usize) {
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, by_dist);
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_dist);
}

/// k nearest source points for each query, ascending by distance, ties by index.
pub fn knn<T: Scalar>(query: &[Point<T>], source: &[Point<T>], k: usize) -> Result<NeighborIndex> {
    check_k(k, source.len())?;
    let mut out = Vec::with_capacity(query.len() * k);
    let mut cands = Vec::with_capacity(source.len());
    for q in query {
        cands.clear();
        cands.extend(source.iter().enumerate().map(|(j, s)| (dist2(q, s), j)));
        k_smallest(&mut cands, k);
        out.extend(cands.iter().map(|&(_, j)| j));
    }
    NeighborIndex::new(out, k, source.len())
}

/// Self-inclusive kNN within one cloud: row `i` starts with `i`, then the
/// `k-1` nearest other points (ties by index).
pub fn knn_self<T: Scalar>(points: &[Point<T>], k: usize) -> Result<NeighborIndex> {
    check_k(k, points.len())?;
    if points.len() > GRID_THRESHOLD {
        return UniformGrid::new(points).knn_self(k);
    }
    let mut out = Vec::with_capacity(points.len() * k);
    let mut cands = Vec::with_capacity(points.len());
    for (i, q) in points.iter().enumerate() {
        cands.clear();
        cands.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, s)| (dist2(q, s), j)),
        );
        out.push(i);
        if k > 1 {
            k_smallest(&mut cands, k - 1);
            out.extend(cands.iter().map(|&(_, j)| j));
        }
    }
    NeighborIndex::new(out, k, points.len())
}

/// Above this size `knn_self` goes through the grid accelerator.
const GRID_THRESHOLD: usize = 2048;

/// Uniform-grid bucketing of a point set; queries return exactly what the
/// brute-force scan returns.
pub struct UniformGrid<'a, T> {
    points: &'a [Point<T>],
    origin: Point<T>,
    cell: T,
    dims: [usize; 3],
    starts: Vec<usize>,
    members: Vec<usize>,
}

impl<'a, T: Scalar> UniformGrid<'a, T> {
    /// Grid sized for roughly a handful of points per occupied cell.
    pub fn new(points: &'a [Point<T>]) -> Self {
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext: Vec<T> = (0..3).map(|a| (hi[a] - lo[a]).max(T::zero())).collect();
        let extent = ext.iter().copied().fold(T::zero(), T::max);
        // surfaces dominate: scale cell with the square root of the density
        let per_side = count::<T>(points.len()).sqrt() / cast(2.0);
        let cell = if extent > T::zero() {
            extent / per_side.max(T::one())
        } else {
            T::one()
        };
        Self::with_cell(points, cell)
    }

    pub fn with_cell(points: &'a [Point<T>], cell: T) -> Self {
        let mut origin = [T::infinity(); 3];
        for p in points {
            for a in 0..3 {
                origin[a] = origin[a].min(p[a]);
            }
        }
        if points.is_empty() {
            origin = [T::zero(); 3];
        }
        let mut dims = [1usize; 3];
        for p in points {
            for a in 0..3 {
                let c = ((p[a] - origin[a]) / cell).floor().to_usize().unwrap_or(0);
                dims[a] = dims[a].max(c + 1);
            }
        }
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncells + 1];
        let keys: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::coord(&origin, cell, p);
                Self::flat(&dims, [c[0] as usize, c[1] as usize, c[2] as usize])
            })
            .collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut members = vec![0usize; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            members[fill[k]] = i;
            fill[k] += 1;
        }
        Self {
            points,
            origin,
            cell,
            dims,
            starts,
            members,
        }
    }

    fn coord(origin: &Point<T>, cell: T, p: &Point<T>) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - origin[a]) / cell).floor().to_i64().unwrap_or(0))
    }

    fn flat(dims: &[usize; 3], c: [usize; 3]) -> usize {
        (c[0] * dims[1] + c[1]) * dims[2] + c[2]
    }

    fn visit_ring(&self, center: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        let d = self.dims.map(|v| v as i64);
        for x in center[0] - r..=center[0] + r {
            if x < 0 || x >= d[0] {
                continue;
            }
            for y in center[1] - r..=center[1] + r {
                if y < 0 || y >= d[1] {
                    continue;
                }
                let edge_xy = (x - center[0]).abs() == r || (y - center[1]).abs() == r;
                let zs: Vec<i64> = if edge_xy {
                    (center[2] - r..=center[2] + r).collect()
                } else {
                    vec![center[2] - r, center[2] + r]
                };
                for z in zs {
                    if z < 0 || z >= d[2] {
                        continue;
                    }
                    let cell = Self::flat(&self.dims, [x as usize, y as usize, z as usize]);
                    for &m in &self.members[self.starts[cell]..self.starts[cell + 1]] {
                        f(m);
                    }
                }
            }
        }
    }

    /// k nearest indices to `q`, excluding `skip`; identical ordering to a full scan.
    pub fn nearest(&self, q: &Point<T>, k: usize, skip: Option<usize>) -> Vec<usize> {
        let center = Self::coord(&self.origin, self.cell, q);
        let max_r = (0..3)
            .map(|a| center[a].abs().max((self.dims[a] as i64 - 1 - center[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut cands: Vec<(T, usize)> = Vec::new();
        let mut r = 0i64;
        loop {
            self.visit_ring(center, r, |m| {
                if Some(m) != skip {
                    cands.push((dist2(q, &self.points[m]), m));
                }
            });
            if r >= max_r {
                break;
            }
            if cands.len() >= k && r >= 1 {
                k_smallest(&mut cands, k);
                // unvisited points lie at least (r·cell) away; half a cell of slack
                // absorbs rounding in the cell assignment
                let reach = (cast::<T>(r as f64) - cast(0.5)) * self.cell;
                if cands[k - 1].0 < reach * reach {
                    break;
                }
            }
            r += 1;
        }
        k_smallest(&mut cands, k);
        cands.into_iter().map(|(_, j)| j).collect()
    }

    pub fn knn(&self, query: &[Point<T>], k: usize) -> Result<NeighborIndex> {
        check_k(k, self.points.len())?;
        let mut out = Vec::with_capacity(query.len() * k);
        for q in query {
            out.extend(self.nearest(q, k, None));
        }
        NeighborIndex::new(out, k, self.points.len())
    }

    pub fn knn_self(&self, k: usize) -> Result<NeighborIndex> {
        check_k(k, self.points.len())?;
        let mut out = Vec::with_capacity(self.points.len() * k);
        for (i, q) in self.points.iter().enumerate() {
            out.push(i);
            if k > 1 {
                out.extend(self.nearest(q, k - 1, Some(i)));
            }
        }
        NeighborIndex::new(out, k, self.points.len())
    }
}

/// Greedy farthest point sampling; ties go to the smallest index.
pub fn farthest_point_sample<T: Scalar>(positions: &[Point<T>], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m == 0 || m > n {
        return Err(Error::InsufficientPoints {
            needed: m.max(1),
            available: n,
        });
    }
    if start >= n {
        return Err(Error::Config(format!("start index {start} out of range for {n} points")));
    }
    let mut chosen = vec![false; n];
    let mut min_d = vec![T::infinity(); n];
    let mut out = Vec::with_capacity(m);
    let mut last = start;
    for _ in 0..m {
        out.push(last);
        chosen[last] = true;
        let p = positions[last];
        let mut best: Option<(T, usize)> = None;
        for j in 0..n {
            let d = dist2(&p, &positions[j]);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if !chosen[j] && best.map_or(true, |(bd, _)| min_d[j] > bd) {
                best = Some((min_d[j], j));
            }
        }
        match best {
            Some((_, j)) => last = j,
            None => break,
        }
    }
    Ok(out)
}

/// Index of the point nearest the centroid (ties by index).
pub fn nearest_to_centroid<T: Scalar>(positions: &[Point<T>]) -> usize {
    let c = centroid(positions);
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, &c), i))
        .min_by(by_dist)
        .map_or(0, |(_, i)| i)
}

/// One point per occupied voxel: mean position and features, majority label.
pub fn voxel_downsample<T: Scalar>(cloud: &PointCloud<T>, resolution: T) -> Result<PointCloud<T>> {
    if !(resolution > T::zero()) {
        return Err(Error::Config("voxel resolution must be positive".into()));
    }
    let mut voxels: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = p.map(|v| (v / resolution).floor().to_i64().unwrap_or(0));
        voxels.entry(key).or_default().push(i);
    }
    let d = cloud.feature_width();
    let mut positions = Vec::with_capacity(voxels.len());
    let mut feats = Vec::with_capacity(voxels.len() * d);
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(voxels.len()));
    for members in voxels.values() {
        let inv = T::one() / count::<T>(members.len());
        let mut p = [T::zero(); 3];
        let mut f = vec![T::zero(); d];
        for &i in members {
            for a in 0..3 {
                p[a] += cloud.positions[i][a];
            }
            for (o, &v) in f.iter_mut().zip(cloud.features.row(i)) {
                *o += v;
            }
        }
        positions.push(p.map(|v| v * inv));
        feats.extend(f.into_iter().map(|v| v * inv));
        if let (Some(out), Some(src)) = (labels.as_mut(), cloud.labels.as_ref()) {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in members {
                *votes.entry(src[i]).or_default() += 1;
            }
            // max count, smallest id on ties (BTreeMap iterates ascending)
            let (label, _) = votes
                .iter()
                .fold((0, 0), |best, (&l, &c)| if c > best.1 { (l, c) } else { best });
            out.push(label);
        }
    }
    let n = positions.len();
    Ok(PointCloud {
        positions,
        features: Tensor::new(vec![n, d], feats)?,
        labels,
        object_class: cloud.object_class.clone(),
    })
}

/// Distance floor for inverse-distance weights.
pub const INTERP_EPS: f64 = 1e-8;

/// Inverse-distance weights over the k nearest coarse points of each fine point.
pub fn interpolation_weights<T: Scalar>(
    fine: &[Point<T>],
    coarse: &[Point<T>],
    k: usize,
) -> Result<(NeighborIndex, Vec<T>)> {
    if coarse.is_empty() {
        return Err(Error::InsufficientPoints {
            needed: k.max(1),
            available: 0,
        });
    }
    let nbr = knn(fine, coarse, k)?;
    let eps: T = cast(INTERP_EPS);
    let mut weights = Vec::with_capacity(fine.len() * k);
    for (i, q) in fine.iter().enumerate() {
        let raw: Vec<T> = nbr
            .row(i)
            .iter()
            .map(|&j| T::one() / (dist2(q, &coarse[j]).sqrt() + eps))
            .collect();
        let total: T = raw.iter().copied().sum();
        weights.extend(raw.into_iter().map(|w| w / total));
    }
    Ok((nbr, weights))
}

/// Upsamples coarse features onto fine positions by inverse-distance weighting.
pub fn interpolate_features<T: Scalar>(
    fine: &[Point<T>],
    coarse: &PointCloud<T>,
    k: usize,
) -> Result<Tensor<T>> {
    let (nbr, w) = interpolation_weights(fine, &coarse.positions, k)?;
    let d = coarse.feature_width();
    let mut out = vec![T::zero(); fine.len() * d];
    for i in 0..fine.len() {
        let row = &mut out[i * d..(i + 1) * d];
        for (j, &src) in nbr.row(i).iter().enumerate() {
            let wij = w[i * k + j];
            for (o, &v) in row.iter_mut().zip(coarse.features.row(src)) {
                *o += wij * v;
            }
        }
    }
    Tensor::new(vec![fine.len(), d], out)
}
