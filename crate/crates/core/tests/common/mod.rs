//! Shared fixtures: seeded randomness, brute-force references and a
//! central-difference gradient checker.
#![allow(dead_code)]

use lunit::autodiff::{Tape, Var};
use lunit::geometry::{NeighborIndex, Point};
use lunit::params::{Forward, Mode, ParamStore};
use lunit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point<f64>> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

/// Random `n×k` neighbor table whose first column is the point itself.
pub fn random_self_neighbors(rng: &mut impl Rng, n: usize, k: usize) -> NeighborIndex {
    let mut idx = Vec::with_capacity(n * k);
    for i in 0..n {
        idx.push(i);
        for _ in 1..k {
            idx.push(rng.random_range(0..n));
        }
    }
    NeighborIndex::new(idx, k, n).unwrap()
}

/// k nearest by exhaustive scan; ties go to the smaller index, the query's own
/// index first when the query is one of the sources.
pub fn brute_knn(query: &[Point<f64>], source: &[Point<f64>], k: usize) -> Vec<Vec<usize>> {
    query
        .iter()
        .map(|q| {
            let mut order: Vec<(f64, usize)> = source
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let d: f64 = (0..3).map(|c| (q[c] - s[c]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            order.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Unit circle in the z=0 plane with Gaussian radial noise.
pub fn noisy_circle(rng: &mut impl Rng, n: usize, sigma: f64) -> Vec<Point<f64>> {
    let noise = Normal::new(0.0, sigma).unwrap();
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            let r = 1.0 + noise.sample(rng);
            [r * t.cos(), r * t.sin(), 0.0]
        })
        .collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Finite-difference step and the accepted relative error.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Gradients below this magnitude are compared absolutely; central differences
/// cannot resolve them relative to round-off in the loss.
const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Worst relative error across the input and every trainable parameter.
#[derive(Debug)]
pub struct GradReport {
    pub worst: f64,
    pub where_: String,
    pub checked: usize,
}

/// Checks `loss = Σ out ⊙ probe` in training mode against central differences
/// over every entry of `x` and of every trainable parameter in `store`.
pub fn check_gradients<F>(store: &ParamStore<f64>, x: &Tensor<f64>, seed: u64, layer: F) -> GradReport
where
    F: for<'a> Fn(&Forward<'a, f64>, Var<'a, f64>) -> lunit::Result<Var<'a, f64>>,
{
    let probe = {
        let tape = Tape::new();
        let f = Forward::new(&tape, store, Mode::Train);
        let out = layer(&f, tape.constant(x.clone())).unwrap();
        let shape = out.shape();
        let mut r = rng(seed);
        let data = (0..shape.iter().product()).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    };
    let loss = |s: &ParamStore<f64>, xv: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let f = Forward::new(&tape, s, Mode::Train);
        let out = layer(&f, tape.constant(xv.clone())).unwrap();
        out.mul(f.constant(probe.clone())).unwrap().sum().to_tensor().data()[0]
    };

    let tape = Tape::new();
    let f = Forward::new(&tape, store, Mode::Train);
    let xv = tape.var(x.clone());
    let out = layer(&f, xv).unwrap();
    let l = out.mul(f.constant(probe.clone())).unwrap().sum();
    l.backward().unwrap();
    let gx = xv.grad().expect("input gradient");
    let grads = f.finish().grads;

    let mut report = GradReport {
        worst: 0.0,
        where_: String::new(),
        checked: 0,
    };
    let mut note = |a: f64, n: f64, what: String| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.worst {
            report.worst = e;
            report.where_ = format!("{what}: analytic {a:e} numeric {n:e}");
        }
    };

    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let n = (loss(store, &plus) - loss(store, &minus)) / (2.0 * FD_STEP);
        note(gx.data()[i], n, format!("input[{i}]"));
    }
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let g = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| panic!("no gradient for {}", p.name));
        for i in 0..p.value.len() {
            let mut s = store.clone();
            s.get_mut(id).value.data_mut()[i] += FD_STEP;
            let lp = loss(&s, x);
            s.get_mut(id).value.data_mut()[i] -= 2.0 * FD_STEP;
            let lm = loss(&s, x);
            note(g.data()[i], (lp - lm) / (2.0 * FD_STEP), format!("{}[{i}]", p.name));
        }
    }
    report
}
