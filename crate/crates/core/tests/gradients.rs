//! Central-difference checks for every primitive and every layer.

mod common;

use std::sync::Arc;

use common::*;
use lunit::autodiff::{Tape, Var};
use lunit::geometry::knn_self;
use lunit::layers::{BatchNorm, Bottleneck, Fusion, KernelPoints, KpConvDs, LaplacianUnit, Linear, LuConfig, Mlp, PairGeometry};
use lunit::params::{Forward, ParamStore};
use lunit::tensor::Tensor;
use lunit::training::cross_entropy;
use rand::Rng;

fn assert_ok(name: &str, r: GradReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.worst <= FD_TOL, "{name}: worst relative error {:e} at {}", r.worst, r.where_);
}

/// Checks a parameter-free op through the generic checker.
fn check_op<F>(name: &str, x: &Tensor<f64>, op: F)
where
    F: for<'a> Fn(&Forward<'a, f64>, Var<'a, f64>) -> lunit::Result<Var<'a, f64>>,
{
    let store = ParamStore::new();
    for seed in 0..3 {
        assert_ok(name, check_gradients(&store, x, seed, &op));
    }
}

/// Keeps entries away from the ReLU kink so the difference quotient is smooth.
fn off_kink(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    t
}

#[test]
fn primitive_gradients_match_central_differences() {
    let mut r = rng(1);
    for trial in 0..10 {
        let x = random_tensor(&mut r, 4, 3);
        let b = random_tensor(&mut r, 3, 5);
        let c = random_tensor(&mut r, 4, 3);
        let row = random_tensor(&mut r, 1, 3).reshape(&[3]).unwrap();
        let t = format!("trial {trial}");

        check_op(&format!("matmul {t}"), &x, |f, v| v.matmul(f.constant(b.clone())));
        check_op(&format!("add/sub {t}"), &x, |f, v| v.add(f.constant(c.clone()))?.sub(v.scale(0.3)));
        check_op(&format!("mul {t}"), &x, |_, v| v.mul(v));
        check_op(&format!("row ops {t}"), &x, |f, v| {
            v.mul_row(f.constant(row.clone()))?.add_row(f.constant(row.clone()))
        });
        check_op(&format!("relu {t}"), &off_kink(x.clone()), |_, v| Ok(v.relu()));
        check_op(&format!("exp/log {t}"), &x, |_, v| Ok(v.exp().add_scalar(1.0).log()));
        check_op(&format!("softmax {t}"), &x, |_, v| v.softmax_rows());
        check_op(&format!("log_softmax {t}"), &x, |_, v| v.log_softmax_rows());
        check_op(&format!("axis sums {t}"), &x, |_, v| {
            let a = v.sum_axis(0)?.reshape(&[1, 3])?;
            let m = v.mean_axis(1)?.reshape(&[4, 1])?;
            a.matmul(v.reshape(&[3, 4])?)?.reshape(&[4, 1])?.add(m)
        });
        check_op(&format!("concat {t}"), &x, |f, v| f.tape().concat_cols(&[v, v.scale(2.0), f.constant(c.clone())]));
        let idx: Arc<[usize]> = vec![3, 0, 0, 2, 1].into();
        check_op(&format!("gather {t}"), &x, |_, v| v.gather_rows(idx.clone()));
        let groups: Arc<[usize]> = vec![1, 0, 1, 1].into();
        check_op(&format!("scatter_mean {t}"), &x, |_, v| v.scatter_mean(groups.clone(), 3));
        let widx: Arc<[usize]> = vec![0, 2, 1, 1, 3, 0].into();
        let w: Arc<[f64]> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>().into();
        check_op(&format!("weighted_gather {t}"), &x, |_, v| v.weighted_gather(widx.clone(), w.clone(), 2));
        let nbr = random_self_neighbors(&mut r, 4, 3);
        check_op(&format!("umbrella {t}"), &x, |_, v| v.umbrella(nbr.shared(), 3));
        let cols: Arc<[usize]> = vec![2, 0, 1, 2].into();
        check_op(&format!("select {t}"), &x, |_, v| v.select_per_row(cols.clone()));
        check_op(&format!("batch_normalize {t}"), &x, |_, v| Ok(v.batch_normalize(1e-5)?.0));
        check_op(&format!("cross_entropy {t}"), &x, |_, v| cross_entropy(v, &[2, 0, 1, 1]));
    }
}

#[test]
fn linear_and_mlp() {
    let mut r = rng(2);
    for trial in 0..5 {
        let x = random_tensor(&mut r, 12, 5);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 4, true, &mut r);
        assert_ok("linear", check_gradients(&store, &x, trial, |f, v| lin.forward(f, v)));

        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", 5, &[6, 3], trial % 2 == 0, &mut r);
        assert_ok("mlp", check_gradients(&store, &x, trial, |f, v| mlp.forward(f, v)));
    }
}

#[test]
fn batch_norm_with_affine() {
    let mut r = rng(3);
    for trial in 0..5 {
        let x = random_tensor(&mut r, 10, 4);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 4);
        // move γ, β off their initial values so both enter nontrivially
        for id in [bn.gamma(), bn.beta()] {
            let t = random_tensor(&mut r, 1, 4).reshape(&[4]).unwrap();
            store.set_value(id, t).unwrap();
        }
        assert_ok("batch norm", check_gradients(&store, &x, trial, |f, v| bn.forward(f, v)));
        // mean of the output, as in the layer contract
        assert_ok(
            "batch norm mean",
            check_gradients(&store, &x, trial, |f, v| Ok(bn.forward(f, v)?.mean())),
        );
    }
}

#[test]
fn laplacian_unit_every_fusion_and_switch() {
    let mut r = rng(4);
    let pos = random_points(&mut r, 20);
    let nbr = knn_self(&pos, 6).unwrap();
    for fusion in [Fusion::Add, Fusion::Concat, Fusion::Mul, Fusion::None] {
        for (use_m, use_t) in [(true, true), (false, true), (true, false), (false, false)] {
            for (d_in, d_out) in [(4, 4), (4, 3)] {
                if d_in != d_out && fusion != Fusion::Concat && fusion != Fusion::None {
                    continue;
                }
                if d_in != d_out && !use_m {
                    continue;
                }
                let cfg = LuConfig {
                    k: 6,
                    use_m,
                    use_t,
                    fusion,
                    d_in,
                    d_out,
                };
                let mut store = ParamStore::new();
                let lu = LaplacianUnit::new(&mut store, "lu", cfg, &mut r).unwrap();
                // a larger M keeps the BN input well scaled for the check
                if let Some(m) = lu.m() {
                    store.set_value(m, random_tensor(&mut r, d_in, d_out)).unwrap();
                }
                let x = random_tensor(&mut r, 20, d_in);
                let name = format!("lu {fusion} M={use_m} T={use_t} {d_in}->{d_out}");
                assert_ok(&name, check_gradients(&store, &x, 7, |f, v| lu.forward(f, v, &nbr)));
            }
        }
    }
}

#[test]
fn kpconv_ds() {
    let mut r = rng(5);
    for trial in 0..3 {
        let pos = random_points(&mut r, 16);
        let geom = PairGeometry::new(&pos, &pos, knn_self(&pos, 5).unwrap()).unwrap();
        let kernel = KernelPoints::new(7, 0.8).unwrap();
        let mut store = ParamStore::new();
        let conv = KpConvDs::new(&mut store, "conv", 3, 4, &kernel, 1 + trial as usize % 2, &mut r).unwrap();
        let x = random_tensor(&mut r, 16, 3);
        assert_ok("kpconv_ds", check_gradients(&store, &x, trial, |f, v| conv.forward(f, v, &geom)));

        // strided: 6 queries aggregating over 16 sources
        let q = &pos[..6];
        let nbr = lunit::geometry::knn(q, &pos, 5).unwrap();
        let geom = PairGeometry::new(q, &pos, nbr).unwrap();
        assert_ok(
            "kpconv_ds strided",
            check_gradients(&store, &x, trial + 10, |f, v| conv.forward(f, v, &geom)),
        );
    }
}

#[test]
fn bottleneck_block() {
    let mut r = rng(6);
    for trial in 0..3 {
        let pos = random_points(&mut r, 10);
        let geom = PairGeometry::new(&pos, &pos, knn_self(&pos, 4).unwrap()).unwrap();
        let kernel = KernelPoints::new(5, 0.9).unwrap();
        let mut store = ParamStore::new();
        let block = Bottleneck::new(&mut store, "b", 8, 4, &kernel, 1, &mut r).unwrap();
        let x = random_tensor(&mut r, 10, 8).map(|v| v + 0.3);
        assert_ok("bottleneck", check_gradients(&store, &x, trial, |f, v| block.forward(f, v, &geom)));
    }
}

#[test]
fn tape_without_params_records_nothing_trainable() {
    let tape = Tape::<f64>::new();
    let store = ParamStore::new();
    let f = Forward::new(&tape, &store, lunit::params::Mode::Train);
    let v = f.constant(Tensor::eye(2));
    assert!(!v.requires_grad());
    assert!(f.finish().grads.is_empty());
}

#[test]
fn checker_flags_a_detached_path() {
    // x ⊙ stop_grad(x): the analytic gradient misses half of the true slope
    let x = random_tensor(&mut rng(8), 3, 3);
    let r = check_gradients(&ParamStore::new(), &x, 0, |f, v| v.mul(f.constant(v.to_tensor())));
    assert!(r.worst > 0.4, "{r:?}");
}
