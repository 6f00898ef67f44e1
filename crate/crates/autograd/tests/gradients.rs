use std::rc::Rc;

use cpc_autograd::{grad, Graph, Mat, SparseMatrix, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Central finite differences of a scalar function of one matrix.
fn numeric_grad(f: &dyn Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut xp = x.clone();
        xp[[r, c]] += h;
        let mut xm = x.clone();
        xm[[r, c]] -= h;
        out[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    out
}

fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Checks first and second derivatives of `x -> sum(build(x) ⊙ w)`.
fn check(name: &str, x0: Mat, build: impl for<'g> Fn(Var<'g>) -> Var<'g>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let out_shape = {
        let g = Graph::new();
        build(g.param(x0.clone())).shape()
    };
    let w = random(&mut rng, out_shape.0, out_shape.1);
    let v = random(&mut rng, x0.nrows(), x0.ncols());

    let scalar = |x: &Mat| {
        let g = Graph::new();
        let y = build(g.param(x.clone()));
        (y * g.constant(w.clone())).sum().item()
    };
    // g(x)·v, evaluated through the analytic gradient
    let directional = |x: &Mat| {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let y = (build(xv) * g.constant(w.clone())).sum();
        let gx = grad(y, &[xv], false)[0];
        (gx.value().as_ref() * &v).sum()
    };

    let g = Graph::new();
    let x = g.param(x0.clone());
    let loss = (build(x) * g.constant(w.clone())).sum();
    let gx = grad(loss, &[x], true)[0];
    let first = gx.value().as_ref().clone();
    let fd = numeric_grad(&scalar, &x0, 1e-5);
    let e1 = max_rel_err(&first, &fd);
    assert!(e1 < 1e-6, "{name}: first-order rel err {e1}");

    let hv = (gx * g.constant(v.clone())).sum();
    let second = grad(hv, &[x], false)[0].value().as_ref().clone();
    let fd2 = numeric_grad(&directional, &x0, 1e-5);
    let e2 = max_rel_err(&second, &fd2);
    assert!(e2 < 1e-5, "{name}: second-order rel err {e2}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 3, 4);
    let pos = x.mapv(|v| v.abs() + 0.5);
    check("tanh", x.clone(), |x| x.tanh());
    check("sigmoid", x.clone(), |x| x.sigmoid());
    check("softplus", x.clone(), |x| x.softplus());
    check("exp", x.clone(), |x| x.exp());
    check("ln", pos.clone(), |x| x.ln());
    check("powf", pos.clone(), |x| x.powf(-1.5));
    check("mul_self", x.clone(), |x| x * x.tanh());
    check("sub_scale", x.clone(), |x| (x - x.sigmoid()).scale(3.0).add_scalar(1.0));
    check("abs", pos, |x| x.abs() * x);
}

#[test]
fn reductions_and_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 3, 5);
    check("sum_rows", x.clone(), |x| x.sum_rows().broadcast_rows(3) * x);
    check("sum_cols", x.clone(), |x| x.sum_cols().broadcast_cols(5) * x);
    check("softmax", x.clone(), |x| x.softmax_rows() * x);
    check("mean", x.clone(), |x| x.mean().broadcast_scalar(2, 2).exp());
    check("max_min", x.clone(), |x| (x.max_all() - x.min_all()).powf(2.0));
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = random(&mut rng, 4, 3);
    let x = random(&mut rng, 2, 4);
    let bt = b.t().to_owned();
    check("nn", x.clone(), |x| {
        let c = x.graph().constant(b.clone());
        x.matmul(c).tanh()
    });
    check("nt", x.clone(), |x| {
        let c = x.graph().constant(bt.clone());
        x.matmul_nt(c).tanh()
    });
    let xt = x.t().to_owned();
    check("tn", xt.clone(), |x| {
        let c = x.graph().constant(b.clone());
        x.matmul_tn(c).tanh()
    });
    check("tt", xt, |x| {
        let c = x.graph().constant(bt.clone());
        x.matmul_tt(c).tanh()
    });
    // both sides depend on the variable
    let sq = random(&mut rng, 3, 3);
    check("self_product", sq.clone(), |x| x.matmul(x.t()).tanh());
    check("self_product_tn", sq, |x| x.matmul_tn(x.tanh()).sigmoid());
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 4, 6);
    check("slice_rows", x.clone(), |x| x.slice_rows(1, 2).pad_rows(2, 5).tanh());
    check("slice_cols", x.clone(), |x| x.slice_cols(2, 3).pad_cols(1, 7).sigmoid());
    check("reshape", x.clone(), |x| x.reshape(3, 8).softmax_rows());
    check("transpose", x.clone(), |x| x.t().tanh());
    check("concat", x.clone(), |x| Var::concat_rows(&[x.slice_rows(0, 1), x.tanh()]));
    let sparse = Rc::new(SparseMatrix::from_triplets(
        5,
        4,
        &[(0, 0, 0.5), (0, 1, 0.5), (2, 3, 1.0), (4, 2, -2.0), (4, 2, 0.25)],
    ));
    check("sparse", x.clone(), |x| x.sparse_left(Rc::clone(&sparse), false).tanh());
    let sparse_t = Rc::new(SparseMatrix::from_triplets(4, 3, &[(0, 0, 1.0), (3, 2, 2.0), (1, 1, -1.0)]));
    check("sparse_t", x, |x| x.sparse_left(Rc::clone(&sparse_t), true).sigmoid());
}

#[test]
fn sparse_matches_dense() {
    let triplets = [(0, 0, 1.0), (1, 2, 3.0), (1, 2, 1.0), (2, 1, -1.0)];
    let s = SparseMatrix::from_triplets(3, 3, &triplets);
    let dense = s.to_dense();
    assert_eq!(dense[[1, 2]], 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, 3, 2);
    let diff = &s.apply(&x) - &dense.dot(&x);
    assert!(diff.iter().all(|d| d.abs() < 1e-15));
    let diff_t = &s.apply_transposed(&x) - &dense.t().dot(&x);
    assert!(diff_t.iter().all(|d| d.abs() < 1e-15));
}

#[test]
fn unused_inputs_get_zero_gradient() {
    let g = Graph::new();
    let a = g.param(Mat::ones((2, 2)));
    let b = g.param(Mat::ones((3, 1)));
    let loss = a.tanh().sum();
    let grads = grad(loss, &[a, b], false);
    assert_eq!(grads[1].shape(), (3, 1));
    assert!(grads[1].value().iter().all(|&v| v == 0.0));
}

#[test]
fn constants_do_not_require_grad() {
    let g = Graph::new();
    let c = g.constant(Mat::ones((2, 2)));
    let p = g.param(Mat::ones((2, 2)));
    assert!(!c.tanh().requires_grad());
    assert!((c * p).requires_grad());
}
