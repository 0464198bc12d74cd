//! Finite-difference checks for every op, at tiny shapes.

use ndarray::{Array, Array1, Array2, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::finite_diff_max_rel_err;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_simple_fn(ndarray::IxDyn(shape), || {
        rng.random::<f64>() * 2.0 - 1.0
    })
}

/// Shift values away from activation kinks so central differences stay valid.
fn no_kinks(mut x: ArrayD<f64>) -> ArrayD<f64> {
    x.mapv_inplace(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
    x
}

fn check<F>(build: F, input: ArrayD<f64>)
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    let err = finite_diff_max_rel_err(build, &input, 1e-5, 24, 7);
    assert!(err < 2e-6, "max rel err {err}");
}

#[test]
fn fd_pointwise_ops() {
    let x = no_kinks(randn(&[2, 3, 4, 4], 1));
    check(|g, x| { let y = relu(g, x); mean_all(g, y) }, x.clone());
    check(|g, x| { let y = leaky_relu(g, x, 0.2); mean_all(g, y) }, x.clone());
    check(|g, x| { let y = tanh(g, x); mean_all(g, y) }, x.clone());
    check(|g, x| { let y = sigmoid(g, x); mean_all(g, y) }, x.clone());
    check(|g, x| { let y = scale(g, x, -1.7); let y = add_scalar(g, y, 0.3); mean_all(g, y) }, x.clone());
    check(
        |g, x| {
            let c = g.leaf(randn(&[2, 3, 4, 4], 2));
            let s = sub(g, x, c);
            let p = mul(g, s, s);
            let a = add(g, p, x);
            mean_all(g, a)
        },
        x,
    );
}

#[test]
fn fd_instance_norm() {
    check(
        |g, x| {
            let y = instance_norm(g, x, 1e-5);
            let sq = mul(g, y, y);
            let w = g.leaf(randn(&[2, 2, 3, 3], 5));
            let z = mul(g, sq, w);
            mean_all(g, z)
        },
        randn(&[2, 2, 3, 3], 4),
    );
}

#[test]
fn fd_resampling() {
    let w = randn(&[1, 2, 8, 8], 11);
    check(
        move |g, x| {
            let y = upsample2x(g, x);
            let wn = g.leaf(w.clone());
            let z = mul(g, y, wn);
            mean_all(g, z)
        },
        randn(&[1, 2, 4, 4], 10),
    );
    let w = randn(&[1, 2, 2, 2], 13);
    check(
        move |g, x| {
            let y = avg_pool2x(g, x);
            let wn = g.leaf(w.clone());
            let z = mul(g, y, wn);
            mean_all(g, z)
        },
        randn(&[1, 2, 4, 4], 12),
    );
}

#[test]
fn fd_concat_and_flatten() {
    let other = randn(&[2, 2, 3, 3], 21);
    check(
        move |g, x| {
            let o = g.leaf(other.clone());
            let y = concat_ch(g, &[x, o, x]);
            let f = flatten(g, y);
            let sq = mul(g, f, f);
            mean_all(g, sq)
        },
        randn(&[2, 1, 3, 3], 20),
    );
}

#[test]
fn fd_channel_broadcasts() {
    let x0 = randn(&[2, 3, 4, 4], 30);
    let s0 = randn(&[2, 3], 31);
    let m0 = randn(&[2, 1, 4, 4], 32);
    // gradient w.r.t. the feature map
    let (s, m) = (s0.clone(), m0.clone());
    check(
        move |g, x| {
            let s = g.leaf(s.clone());
            let m = g.leaf(m.clone());
            let a = mul_chan(g, x, s);
            let b = add_chan(g, a, s);
            let c = mul_mask(g, b, m);
            let sq = mul(g, c, c);
            mean_all(g, sq)
        },
        x0.clone(),
    );
    // gradient w.r.t. the per-channel scales
    let x = x0.clone();
    check(
        move |g, s| {
            let x = g.leaf(x.clone());
            let a = mul_chan(g, x, s);
            let b = add_chan(g, a, s);
            mean_all(g, b)
        },
        s0,
    );
    // gradient w.r.t. the mask
    check(
        move |g, m| {
            let x = g.leaf(x0.clone());
            let c = mul_mask(g, x, m);
            let sq = mul(g, c, c);
            mean_all(g, sq)
        },
        m0,
    );
}

#[test]
fn fd_channel_vectors() {
    let x0 = randn(&[2, 3, 4, 4], 33);
    let v0 = randn(&[3], 34);
    let v = v0.clone();
    check(
        move |g, x| {
            let v = g.leaf(v.clone());
            let a = mul_cvec(g, x, v);
            let b = add_cvec(g, a, v);
            let sq = mul(g, b, b);
            mean_all(g, sq)
        },
        x0.clone(),
    );
    check(
        move |g, v| {
            let x = g.leaf(x0.clone());
            let a = mul_cvec(g, x, v);
            let b = add_cvec(g, a, v);
            let sq = mul(g, b, b);
            mean_all(g, sq)
        },
        v0,
    );
}

#[test]
fn fd_row_ops() {
    let b0 = randn(&[3, 5], 41);
    check(
        move |g, x| {
            let y = l2_normalize_rows(g, x);
            let b = g.leaf(b0.clone());
            let c = rowwise_cosine(g, y, b);
            mean_all(g, c)
        },
        randn(&[3, 5], 40),
    );
    let a0 = randn(&[3, 5], 42);
    check(
        move |g, x| {
            let a = g.leaf(a0.clone());
            let c = rowwise_cosine(g, a, x);
            let sq = mul(g, c, c);
            mean_all(g, sq)
        },
        randn(&[3, 5], 43),
    );
}

#[test]
fn fd_softmax_cross_entropy() {
    check(
        |g, x| softmax_cross_entropy(g, x, &[2, 0]),
        randn(&[2, 4], 50),
    );
}

#[test]
fn fd_gaussian_grid_readout() {
    let gy = Array2::from_shape_fn((3, 6), |(i, h)| (-((h as f64 - 2.0 * i as f64).powi(2)) / 4.0).exp());
    let gx = Array2::from_shape_fn((3, 6), |(j, w)| (-((w as f64 - 2.0 * j as f64).powi(2)) / 4.0).exp());
    let ww = Array1::from_vec(vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    check(
        move |g, x| {
            let y = gaussian_grid_readout(g, x, gy.clone(), gx.clone(), ww.clone());
            let n = l2_normalize_rows(g, y);
            let sq = mul(g, n, n);
            mean_all(g, sq)
        },
        randn(&[2, 2, 6, 6], 60),
    );
}

#[test]
fn fd_conv2d() {
    // input gradient
    let w0 = randn(&[3, 2, 3, 3], 71);
    let b0 = randn(&[3], 72);
    let (w, b) = (w0.clone(), b0.clone());
    check(
        move |g, x| {
            let wn = g.leaf(w.clone());
            let bn = g.leaf(b.clone());
            let y = conv2d(g, x, wn, bn, 2, 1);
            let sq = mul(g, y, y);
            mean_all(g, sq)
        },
        randn(&[2, 2, 6, 6], 70),
    );
    // weight gradient
    let x0 = randn(&[2, 2, 6, 6], 73);
    let b = b0.clone();
    check(
        move |g, w| {
            let xn = g.leaf(x0.clone());
            let bn = g.leaf(b.clone());
            let y = conv2d(g, xn, w, bn, 1, 1);
            let sq = mul(g, y, y);
            mean_all(g, sq)
        },
        w0,
    );
    // bias gradient
    let x0 = randn(&[2, 2, 6, 6], 74);
    let w0 = randn(&[3, 2, 3, 3], 75);
    check(
        move |g, b| {
            let xn = g.leaf(x0.clone());
            let wn = g.leaf(w0.clone());
            let y = conv2d(g, xn, wn, b, 2, 1);
            let sq = mul(g, y, y);
            mean_all(g, sq)
        },
        randn(&[3], 76),
    );
}

#[test]
fn fd_conv_transpose2d() {
    let w0 = randn(&[2, 3, 4, 4], 81);
    let b0 = randn(&[3], 82);
    let (w, b) = (w0.clone(), b0.clone());
    check(
        move |g, x| {
            let wn = g.leaf(w.clone());
            let bn = g.leaf(b.clone());
            let y = conv_transpose2d(g, x, wn, bn, 2, 1);
            let sq = mul(g, y, y);
            mean_all(g, sq)
        },
        randn(&[2, 2, 3, 3], 80),
    );
    let x0 = randn(&[2, 2, 3, 3], 83);
    let b = b0.clone();
    check(
        move |g, w| {
            let xn = g.leaf(x0.clone());
            let bn = g.leaf(b.clone());
            let y = conv_transpose2d(g, xn, w, bn, 2, 1);
            let sq = mul(g, y, y);
            mean_all(g, sq)
        },
        w0,
    );
    let x0 = randn(&[2, 2, 3, 3], 84);
    let w0 = randn(&[2, 3, 4, 4], 85);
    check(
        move |g, b| {
            let xn = g.leaf(x0.clone());
            let wn = g.leaf(w0.clone());
            let y = conv_transpose2d(g, xn, wn, b, 2, 1);
            let sq = mul(g, y, y);
            mean_all(g, sq)
        },
        randn(&[3], 86),
    );
}

#[test]
fn fd_linear() {
    let w0 = randn(&[4, 5], 91);
    let b0 = randn(&[4], 92);
    let (w, b) = (w0.clone(), b0.clone());
    check(
        move |g, x| {
            let wn = g.leaf(w.clone());
            let bn = g.leaf(b.clone());
            let y = linear(g, x, wn, bn);
            let sq = mul(g, y, y);
            mean_all(g, sq)
        },
        randn(&[3, 5], 90),
    );
    let x0 = randn(&[3, 5], 93);
    check(
        move |g, w| {
            let xn = g.leaf(x0.clone());
            let bn = g.leaf(b0.clone());
            let y = linear(g, xn, w, bn);
            let sq = mul(g, y, y);
            mean_all(g, sq)
        },
        w0,
    );
}

#[test]
fn conv2d_matches_direct_loops() {
    let x = randn(&[1, 2, 5, 5], 100);
    let w = randn(&[3, 2, 3, 3], 101);
    let b = randn(&[3], 102);
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let wn = g.leaf(w.clone());
    let bn = g.leaf(b.clone());
    let y = conv2d(&mut g, xn, wn, bn, 2, 1);
    let yv = g.value(y);
    // direct convolution oracle
    let (stride, pad) = (2, 1);
    for co in 0..3 {
        for ho in 0..3 {
            for wo in 0..3 {
                let mut acc = b[[co]];
                for ci in 0..2 {
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let hi = (ho * stride + di) as isize - pad as isize;
                            let wi = (wo * stride + dj) as isize - pad as isize;
                            if hi < 0 || hi >= 5 || wi < 0 || wi >= 5 {
                                continue;
                            }
                            acc += x[[0, ci, hi as usize, wi as usize]]
                                * w[[co, ci, di, dj]];
                        }
                    }
                }
                let got = yv[[0, co, ho, wo]];
                assert!((got - acc).abs() < 1e-12, "({co},{ho},{wo}): {got} vs {acc}");
            }
        }
    }
}

#[test]
fn conv_transpose_doubles_spatial_size() {
    let mut g = Graph::new();
    let x = g.leaf(randn(&[2, 3, 4, 4], 110));
    let w = g.leaf(randn(&[3, 5, 4, 4], 111));
    let b = g.leaf(ArrayD::zeros(ndarray::IxDyn(&[5])));
    let y = conv_transpose2d(&mut g, x, w, b, 2, 1);
    assert_eq!(g.value(y).shape(), &[2, 5, 8, 8]);
}

#[test]
fn instance_norm_standardizes_planes() {
    let mut g = Graph::new();
    let x = g.leaf(randn(&[2, 3, 4, 4], 120));
    let y = instance_norm(&mut g, x, 1e-8);
    let yv = y;
    let v = g.value(yv);
    for bi in 0..2 {
        for ci in 0..3 {
            let plane = v.slice(ndarray::s![bi, ci, .., ..]);
            let mean = plane.sum() / 16.0;
            let var = plane.fold(0.0, |a, &x| a + (x - mean) * (x - mean)) / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
