//! Central finite-difference validation of every differentiable operation,
//! in f64 with step 1e-4. Random inputs are kept away from the non-smooth
//! points of abs and PReLU.

use hprn_core::loss::{covariance_matrix, total_loss};
use hprn_core::nn::{conv2d, local_avg_pool, prelu, Conv2d, Linear, MultiHeadAttention};
use hprn_core::slic::LabelMap;
use hprn_core::model::{apply_unfold, fold_reorder, unfold_order};
use hprn_core::tensor::{Shape, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values in [-1,1] excluding a band around zero (kink avoidance).
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let v = if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v };
            if v == 0.0 {
                0.05
            } else {
                v
            }
        })
        .collect()
}

/// Fixed random projection making the scalar loss sensitive to every output
/// element with distinct weights.
fn weighted_sum(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let w: Vec<f64> = (0..t.numel()).map(|_| r.random::<f64>() + 0.25).collect();
    let wt = Tensor::from_vec(t.shape().clone(), w).unwrap();
    t.mul(&wt).unwrap().sum_all()
}

/// Analytic vs central-difference gradients for one parameter under an
/// arbitrary scalar-valued rebuild closure.
fn check_param(param: &Tensor<f64>, loss_fn: &dyn Fn() -> Tensor<f64>, what: &str) {
    param.zero_grad();
    let loss = loss_fn();
    assert_eq!(loss.numel(), 1, "{what}: loss not scalar");
    loss.backward().unwrap();
    let analytic = param.grad_vec();
    let orig = param.to_vec();
    for e in 0..param.numel() {
        let mut d = orig.clone();
        d[e] = orig[e] + FD_STEP;
        param.set_data(&d);
        let lp = loss_fn().item();
        d[e] = orig[e] - FD_STEP;
        param.set_data(&d);
        let lm = loss_fn().item();
        param.set_data(&orig);
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let rel = (analytic[e] - fd).abs() / analytic[e].abs().max(fd.abs()).max(1e-8);
        assert!(
            rel < TOL,
            "{what}: element {e}: analytic {} vs fd {} (rel {rel:.2e})",
            analytic[e],
            fd
        );
    }
}

fn param(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.numel();
    Tensor::parameter(shape, away_from_zero(&mut r, n)).unwrap()
}

#[test]
fn elementwise_ops_gradients() {
    let a = param(Shape::of(&[3, 4]), 1);
    let b = param(Shape::of(&[3, 4]), 2);

    check_param(&a, &|| weighted_sum(&a.add(&b).unwrap(), 10), "add/lhs");
    check_param(&b, &|| weighted_sum(&a.add(&b).unwrap(), 10), "add/rhs");
    check_param(&a, &|| weighted_sum(&a.sub(&b).unwrap(), 11), "sub/lhs");
    check_param(&b, &|| weighted_sum(&a.sub(&b).unwrap(), 11), "sub/rhs");
    check_param(&a, &|| weighted_sum(&a.mul(&b).unwrap(), 12), "mul/lhs");
    check_param(&b, &|| weighted_sum(&a.mul(&b).unwrap(), 12), "mul/rhs");
    // Denominators bounded away from the guard band.
    check_param(&a, &|| weighted_sum(&a.div(&b).unwrap(), 13), "div/lhs");
    check_param(&b, &|| weighted_sum(&a.div(&b).unwrap(), 13), "div/rhs");
    check_param(&a, &|| weighted_sum(&a.abs(), 14), "abs");
    check_param(&a, &|| weighted_sum(&a.scale(-1.7), 15), "scale");
    check_param(&a, &|| weighted_sum(&a.add_scalar(0.3), 16), "add_scalar");
    check_param(&a, &|| weighted_sum(&a.sigmoid(), 17), "sigmoid");
}

#[test]
fn channel_broadcast_gradients() {
    let x = param(Shape::chw(3, 2, 2), 3);
    let s = param(Shape::vector(3), 4);
    check_param(&x, &|| weighted_sum(&x.mul_channel(&s).unwrap(), 20), "mul_channel/x");
    check_param(&s, &|| weighted_sum(&x.mul_channel(&s).unwrap(), 20), "mul_channel/s");
    check_param(&x, &|| weighted_sum(&x.add_channel(&s).unwrap(), 21), "add_channel/x");
    check_param(&s, &|| weighted_sum(&x.add_channel(&s).unwrap(), 21), "add_channel/s");
}

#[test]
fn reduction_gradients() {
    let x = param(Shape::of(&[3, 5]), 5);
    check_param(&x, &|| x.sum_all(), "sum_all");
    check_param(&x, &|| x.mean_all(), "mean_all");
    check_param(&x, &|| weighted_sum(&x.sum_axis(0).unwrap(), 30), "sum_axis0");
    check_param(&x, &|| weighted_sum(&x.sum_axis(1).unwrap(), 31), "sum_axis1");
    check_param(&x, &|| weighted_sum(&x.mean_axis(1).unwrap(), 32), "mean_axis1");
}

#[test]
fn shape_op_gradients() {
    let x = param(Shape::of(&[2, 3, 4]), 6);
    check_param(
        &x,
        &|| weighted_sum(&x.reshape(Shape::of(&[6, 4])).unwrap(), 40),
        "reshape",
    );
    check_param(
        &x,
        &|| weighted_sum(&x.permute(&[2, 0, 1]).unwrap(), 41),
        "permute",
    );
}

#[test]
fn matmul_gradients() {
    let a = param(Shape::of(&[3, 4]), 7);
    let b = param(Shape::of(&[4, 2]), 8);
    check_param(&a, &|| weighted_sum(&a.matmul(&b).unwrap(), 50), "matmul/a");
    check_param(&b, &|| weighted_sum(&a.matmul(&b).unwrap(), 50), "matmul/b");

    let ab = param(Shape::of(&[2, 3, 4]), 9);
    let bb = param(Shape::of(&[2, 4, 3]), 10);
    check_param(
        &ab,
        &|| weighted_sum(&ab.batched_matmul(&bb).unwrap(), 51),
        "bmm/a",
    );
    check_param(
        &bb,
        &|| weighted_sum(&ab.batched_matmul(&bb).unwrap(), 51),
        "bmm/b",
    );
}

#[test]
fn softmax_gradients() {
    let x = param(Shape::of(&[2, 3, 4]), 11);
    for axis in 0..3 {
        check_param(
            &x,
            &|| weighted_sum(&x.softmax(axis).unwrap(), 60 + axis as u64),
            &format!("softmax axis {axis}"),
        );
    }
}

#[test]
fn gather_and_concat_gradients() {
    let x = param(Shape::of(&[2, 5]), 12);
    let idx = [4usize, 0, 2, 2, 1];
    check_param(
        &x,
        &|| weighted_sum(&x.gather_cols(&idx).unwrap(), 70),
        "gather_cols",
    );

    let a = param(Shape::of(&[2, 3]), 13);
    let b = param(Shape::of(&[1, 3]), 14);
    let cat = || weighted_sum(&Tensor::concat_axis0(&[a.clone(), b.clone()]).unwrap(), 71);
    check_param(&a, &cat, "concat/a");
    check_param(&b, &cat, "concat/b");
}

#[test]
fn prelu_gradients_away_from_kink() {
    let x = param(Shape::chw(2, 3, 3), 15);
    let s = Tensor::parameter(Shape::vector(2), vec![0.25, 0.6]).unwrap();
    check_param(&x, &|| weighted_sum(&prelu(&x, &s).unwrap(), 80), "prelu/x");
    check_param(&s, &|| weighted_sum(&prelu(&x, &s).unwrap(), 80), "prelu/slope");
}

#[test]
fn conv2d_gradients() {
    for kernel in [1usize, 3] {
        let x = param(Shape::chw(2, 4, 5), 16 + kernel as u64);
        let w = param(Shape::of(&[3, 2, kernel, kernel]), 17 + kernel as u64);
        let b = param(Shape::vector(3), 18 + kernel as u64);
        let f = || weighted_sum(&conv2d(&x, &w, &b, kernel).unwrap(), 90 + kernel as u64);
        check_param(&x, &f, &format!("conv{kernel}/x"));
        check_param(&w, &f, &format!("conv{kernel}/w"));
        check_param(&b, &f, &format!("conv{kernel}/b"));
    }
}

#[test]
fn local_avg_pool_gradients() {
    let x = param(Shape::chw(2, 6, 8), 19);
    check_param(
        &x,
        &|| weighted_sum(&local_avg_pool(&x, (3, 4)).unwrap(), 100),
        "local_avg_pool",
    );
    // Uneven cells
    let y = param(Shape::chw(1, 5, 7), 20);
    check_param(
        &y,
        &|| weighted_sum(&local_avg_pool(&y, (2, 3)).unwrap(), 101),
        "local_avg_pool/uneven",
    );
}

#[test]
fn linear_and_attention_gradients() {
    let mut r = rng(21);
    let lin = Linear::<f64>::new(4, 3, &mut r).unwrap();
    let x = param(Shape::of(&[5, 4]), 22);
    let f = || weighted_sum(&lin.forward(&x).unwrap(), 110);
    check_param(&x, &f, "linear/x");
    check_param(&lin.weight, &f, "linear/w");
    check_param(&lin.bias, &f, "linear/b");

    let mha = MultiHeadAttention::<f64>::new(4, 2, true, &mut r).unwrap();
    let tokens = param(Shape::of(&[3, 4]), 23);
    let g = || weighted_sum(&mha.forward(&tokens).unwrap(), 111);
    check_param(&tokens, &g, "mha/tokens");
    check_param(&mha.wq.weight, &g, "mha/wq");
    check_param(&mha.wk.weight, &g, "mha/wk");
    check_param(&mha.wv.weight, &g, "mha/wv");
    check_param(&mha.wo.weight, &g, "mha/wo");
    check_param(&mha.wo.bias, &g, "mha/wo.bias");
}

#[test]
fn unfold_fold_gradients_flow_through_permutation() {
    // HW=6, G=4 forces mirror fill.
    let labels = LabelMap::new(2, 3, vec![1, 0, 1, 0, 1, 0], 2).unwrap();
    let perm = unfold_order(&labels, 4).unwrap();
    let x = param(Shape::chw(2, 2, 3), 24);
    check_param(
        &x,
        &|| weighted_sum(&apply_unfold(&x, &perm).unwrap(), 120),
        "unfold",
    );
    check_param(
        &x,
        &|| {
            let grouped = apply_unfold(&x, &perm).unwrap();
            let back = fold_reorder(&grouped, &perm, 2, 3).unwrap();
            weighted_sum(&back, 121)
        },
        "unfold+fold",
    );
}

#[test]
fn covariance_and_total_loss_gradients() {
    let pred = param(Shape::chw(3, 2, 2), 25);
    let gt = param(Shape::chw(3, 2, 2), 26);
    check_param(
        &pred,
        &|| weighted_sum(&covariance_matrix(&pred).unwrap(), 130),
        "covariance",
    );
    let f = || total_loss(&pred, &gt, 2.0).unwrap().total;
    check_param(&pred, &f, "total_loss/pred");
    check_param(&gt, &f, "total_loss/gt");
}

#[test]
fn residual_block_composition_gradients() {
    // Composition: conv -> prelu -> conv -> residual add, the block pattern.
    let mut r = rng(27);
    let c1 = Conv2d::<f64>::new(2, 2, 3, &mut r).unwrap();
    let c2 = Conv2d::<f64>::new(2, 2, 3, &mut r).unwrap();
    let slope = Tensor::parameter(Shape::vector(2), vec![0.25, 0.5]).unwrap();
    let x = param(Shape::chw(2, 4, 4), 28);
    let f = || {
        let y = c2
            .forward(&prelu(&c1.forward(&x).unwrap(), &slope).unwrap())
            .unwrap();
        weighted_sum(&x.add(&y).unwrap(), 140)
    };
    check_param(&x, &f, "block/x");
    check_param(&c1.weight, &f, "block/c1.w");
    check_param(&c2.weight, &f, "block/c2.w");
    check_param(&slope, &f, "block/slope");
}
