mod common;

use common::*;
use lunit::geometry::{centroid, knn_self, positions_tensor, NeighborIndex, Point};
use lunit::laplace::{
    convolve_decomposed, convolve_plain, curvature_probe, flow_step, mean_curvature_flow, median, neighborhood_mean,
    umbrella, FilterWeights,
};
use lunit::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_weights(rng: &mut impl Rng, n: usize, k: usize) -> FilterWeights<f64> {
    FilterWeights::new((0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect(), k).unwrap()
}

fn radial_stats(pts: &[Point<f64>]) -> (f64, f64, f64) {
    let c = centroid(pts);
    let r: Vec<f64> = pts.iter().map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
    (mean, std, r.iter().copied().fold(0.0, f64::max))
}

#[test]
fn plain_convolution_matches_double_loop() {
    let mut r = rng(20);
    let n = 50;
    let x = random_tensor(&mut r, n, 6);
    let nbr = random_self_neighbors(&mut r, n, 7);
    let w = random_weights(&mut r, n, 7);
    let got = convolve_plain(&x, &nbr, &w).unwrap();
    for i in 0..n {
        for c in 0..6 {
            let mut acc = 0.0;
            for j in 0..7 {
                acc += w.row(i)[j] * x.at(nbr.row(i)[j], c);
            }
            assert!((got.at(i, c) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn decomposition_identity_on_100_random_instances() {
    let mut r = rng(21);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=200);
        let d = r.random_range(1..=32);
        let k = r.random_range(1..=n.min(24));
        let x = random_tensor(&mut r, n, d).map(|v| v * 10.0);
        let nbr = random_self_neighbors(&mut r, n, k);
        let w = random_weights(&mut r, n, k);
        let a = convolve_plain(&x, &nbr, &w).unwrap();
        let b = convolve_decomposed(&x, &nbr, &w).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    assert!(worst <= 1e-9, "max abs difference {worst:e}");
}

#[test]
fn filter_special_cases() {
    let mut r = rng(22);
    let n = 30;
    let x = random_tensor(&mut r, n, 4);
    let nbr = random_self_neighbors(&mut r, n, 5);
    // uniform weights average the neighborhood
    let mean = convolve_plain(&x, &nbr, &FilterWeights::uniform(n, 5)).unwrap();
    assert!(mean.max_abs_diff(&neighborhood_mean(&x, &nbr).unwrap()) == 0.0);
    for i in 0..n {
        let want: f64 = nbr.row(i).iter().map(|&j| x.at(j, 2)).sum::<f64>() / 5.0;
        assert!((mean.at(i, 2) - want).abs() < 1e-12);
    }
    // one-hot on self is the identity
    let onehot: Vec<f64> = (0..n).flat_map(|_| [1.0, 0.0, 0.0, 0.0, 0.0]).collect();
    let id = convolve_plain(&x, &nbr, &FilterWeights::new(onehot, 5).unwrap()).unwrap();
    assert_eq!(id, x);
    // constant field: output is x scaled by the weight sum; convex weights leave it unchanged
    let c = Tensor::full(&[n, 4], 1.5);
    let w = random_weights(&mut r, n, 5);
    let out = convolve_decomposed(&c, &nbr, &w).unwrap();
    for i in 0..n {
        let s: f64 = w.row(i).iter().sum();
        assert!((out.at(i, 0) - 1.5 * s).abs() < 1e-12);
    }
    let raw: Vec<f64> = (0..n * 5).map(|_| r.random_range(0.1..1.0)).collect();
    let convex: Vec<f64> = raw.chunks(5).flat_map(|row| {
        let s: f64 = row.iter().sum();
        row.iter().map(move |v| v / s).collect::<Vec<_>>()
    }).collect();
    let convex = FilterWeights::new(convex, 5).unwrap();
    assert!(convex.is_convex(1e-12));
    assert!(convolve_decomposed(&c, &nbr, &convex).unwrap().max_abs_diff(&c) < 1e-12);
    // misaligned weights are a shape error
    assert!(matches!(
        convolve_plain(&x, &nbr, &FilterWeights::uniform(n, 4)),
        Err(lunit::Error::Shape { .. })
    ));
}

#[test]
fn umbrella_examples() {
    let x = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
    let nbr = NeighborIndex::new(vec![1, 2, 0, 0, 0, 0], 2, 3).unwrap();
    let u = umbrella(&x, &nbr).unwrap();
    assert_eq!(u.row(0), &[0.5, 0.5, 0.0]);
    // point at the centroid of its neighbors
    let y = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [-1.0, -2.0, 0.0]]).unwrap();
    let nbr = NeighborIndex::new(vec![1, 2, 0, 0, 0, 0], 2, 3).unwrap();
    assert_eq!(umbrella(&y, &nbr).unwrap().row(0), &[0.0, 0.0, 0.0]);
    let c = Tensor::full(&[3, 5], -2.25);
    assert!(umbrella(&c, &knn_self(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 3).unwrap())
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn umbrella_is_negated_laplacian() {
    let mut r = rng(23);
    for _ in 0..20 {
        let n = r.random_range(2..100);
        let k = r.random_range(1..=n.min(12));
        let x = random_tensor(&mut r, n, 5);
        let nbr = random_self_neighbors(&mut r, n, k);
        let u = umbrella(&x, &nbr).unwrap();
        let mean = neighborhood_mean(&x, &nbr).unwrap();
        for i in 0..n {
            for c in 0..5 {
                let lap = x.at(i, c) - mean.at(i, c);
                assert!((u.at(i, c) + lap).abs() <= 1e-14 * (1.0 + lap.abs()) * 8.0);
            }
        }
    }
}

#[test]
fn flow_reduces_radial_spread_on_a_noisy_circle() {
    let mut r = rng(24);
    let pts = noisy_circle(&mut r, 256, 0.05);
    assert_eq!(mean_curvature_flow(&pts, 8, 0.5, 0).unwrap(), pts);
    let (_, start, _) = radial_stats(&pts);
    let mut cur = pts.clone();
    let mut prev = start;
    for it in 0..10 {
        cur = mean_curvature_flow(&cur, 8, 0.5, 1).unwrap();
        let (_, s, _) = radial_stats(&cur);
        assert!(s < prev, "iteration {it}: {s} !< {prev}");
        prev = s;
    }
    assert!(prev <= 0.5 * start, "{start} -> {prev}");
    // iterating one step at a time equals the multi-iteration call
    assert_eq!(mean_curvature_flow(&pts, 8, 0.5, 10).unwrap(), cur);
}

#[test]
fn flow_shrinks_a_regular_polygon() {
    let n = 24;
    let poly: Vec<Point<f64>> = (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            [2.0 * t.cos(), 2.0 * t.sin(), 0.0]
        })
        .collect();
    let mut cur = poly;
    let (mut mean, _, _) = radial_stats(&cur);
    for _ in 0..5 {
        cur = mean_curvature_flow(&cur, 5, 0.5, 1).unwrap();
        let (m, _, _) = radial_stats(&cur);
        assert!(m < mean);
        mean = m;
    }
}

#[test]
fn flow_never_pushes_a_convex_curve_outward() {
    let mut r = rng(25);
    // an ellipse with jittered parameter spacing
    let mut ts: Vec<f64> = (0..150).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut cur: Vec<Point<f64>> = ts.iter().map(|t| [1.5 * t.cos(), t.sin(), 0.0]).collect();
    let (_, _, mut far) = radial_stats(&cur);
    for _ in 0..20 {
        cur = mean_curvature_flow(&cur, 6, 0.1, 1).unwrap();
        let (_, _, f) = radial_stats(&cur);
        assert!(f <= far + 1e-12, "{f} > {far}");
        far = f;
    }
}

#[test]
fn probe_on_hand_built_configuration() {
    // centre plus four neighbors; x_out moves the centre, delta is explicit
    let x_in = Tensor::from_rows(&[
        [0.0, 0.0, 0.3],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
    ])
    .unwrap();
    let nbr = NeighborIndex::new(
        vec![1, 2, 3, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        4,
        5,
    )
    .unwrap();
    let mut x_out = x_in.clone();
    x_out.row_mut(0)[2] = 0.1;
    let delta = x_out.map(|v| v * 0.5);
    let rep = curvature_probe(&x_in, &x_out, &delta, &nbr).unwrap();
    let direct = |x: &Tensor<f64>, i: usize| -> f64 {
        let mut m = [0.0; 3];
        for &j in nbr.row(i) {
            for c in 0..3 {
                m[c] += (x.at(j, c) - x.at(i, c)) / 4.0;
            }
        }
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    for i in 0..5 {
        assert!((rep.h_in[i] - direct(&x_in, i)).abs() < 1e-15);
        assert!((rep.h_out[i] - direct(&x_out, i)).abs() < 1e-15);
        let dn = delta.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((rep.h_delta[i] - dn).abs() < 1e-15);
    }
    assert!((rep.h_in[0] - 0.3).abs() < 1e-15);
    let zero = curvature_probe(&x_in, &x_out, &Tensor::zeros(&[5, 3]), &nbr).unwrap();
    assert!(zero.h_delta.iter().all(|&v| v == 0.0));

    let mut table = Vec::new();
    rep.write_table(&mut table).unwrap();
    let text = String::from_utf8(table).unwrap();
    assert!(text.starts_with("index\th_in\th_out\th_delta\n0\t"));
    assert_eq!(text.lines().count(), 6);
    assert!(curvature_probe(&x_in, &x_out, &Tensor::zeros(&[5, 2]), &nbr).is_err());
}

#[test]
fn median_convention() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median::<f64>(&[]), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn umbrella_ignores_neighbor_order(seed in any::<u64>(), n in 2usize..40, k in 1usize..8) {
        let mut r = rng(seed);
        let k = k.min(n);
        let x = random_tensor(&mut r, n, 3);
        let nbr = random_self_neighbors(&mut r, n, k);
        let shuffled = nbr.map_rows(|_, row| {
            let mut v = row.to_vec();
            v.shuffle(&mut r);
            v
        }).unwrap();
        let a = umbrella(&x, &nbr).unwrap();
        let b = umbrella(&x, &shuffled).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn decomposition_identity_holds(seed in any::<u64>(), n in 1usize..60, d in 1usize..8, k in 1usize..8) {
        let mut r = rng(seed);
        let k = k.min(n);
        let x = random_tensor(&mut r, n, d);
        let nbr = random_self_neighbors(&mut r, n, k);
        let w = random_weights(&mut r, n, k);
        let a = convolve_plain(&x, &nbr, &w).unwrap();
        let b = convolve_decomposed(&x, &nbr, &w).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn flow_step_is_umbrella_euler_step(seed in any::<u64>(), step in 0.01f64..1.0) {
        let mut r = rng(seed);
        let pts = random_points(&mut r, 30);
        let nbr = knn_self(&pts, 5).unwrap();
        let lap = umbrella(&positions_tensor(&pts), &nbr).unwrap();
        let moved = flow_step(&pts, &nbr, step).unwrap();
        for i in 0..30 {
            for c in 0..3 {
                prop_assert!((moved[i][c] - (pts[i][c] + step * lap.at(i, c))).abs() < 1e-15);
            }
        }
    }
}
