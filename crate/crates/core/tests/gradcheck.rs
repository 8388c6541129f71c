//! Analytic gradients versus central finite differences (h = 1e-5, 64-bit)
//! for every primitive and for composed pipelines, at relative tolerance
//! 1e-4 per element on small random instances.

mod common;

use common::{gradcheck, rand_vec, rng};
use glvm_core::ops::{BnMode, Target};
use glvm_core::{Graph, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn gradcheck_elementwise_and_matmul() {
    let mut r = rng(31);
    let x = rand_vec(&mut r, 12, -1.0, 1.0);
    let w = rand_vec(&mut r, 20, -1.0, 1.0);
    let b = rand_vec(&mut r, 5, -0.5, 0.5);
    gradcheck(
        &|g, t| {
            let y = g.bias_last(&g.matmul(&t[0], &t[1]).unwrap(), &t[2]).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.mean_all(&y).unwrap()
        },
        &[(vec![3, 4], x), (vec![4, 5], w), (vec![5], b)],
        H,
        TOL,
        "matmul+bias+mul",
    );
}

#[test]
fn gradcheck_activations() {
    let mut r = rng(37);
    let x = rand_vec(&mut r, 24, -2.0, 2.0);
    for (name, f) in [
        ("relu", 0usize),
        ("silu", 1),
        ("gelu", 2),
        ("softplus", 3),
        ("sigmoid", 4),
    ] {
        gradcheck(
            &move |g: &Graph<f64>, t: &[Tensor<f64>]| {
                let y = match f {
                    0 => g.relu(&t[0]).unwrap(),
                    1 => g.silu(&t[0]).unwrap(),
                    2 => g.gelu(&t[0]).unwrap(),
                    3 => g.softplus(&t[0]).unwrap(),
                    _ => g.sigmoid(&t[0]).unwrap(),
                };
                let y = g.mul(&y, &y).unwrap();
                g.sum_all(&y).unwrap()
            },
            &[(vec![24], x.clone())],
            H,
            TOL,
            name,
        );
    }
}

#[test]
fn gradcheck_softmax() {
    let mut r = rng(41);
    let x = rand_vec(&mut r, 12, -2.0, 2.0);
    let wsum = rand_vec(&mut r, 12, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let y = g.softmax_last(&t[0]).unwrap();
            let y = g.mul(&y, &t[1]).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[(vec![3, 4], x), (vec![3, 4], wsum)],
        H,
        TOL,
        "softmax",
    );
}

#[test]
fn gradcheck_conv_variants() {
    let mut r = rng(43);
    // pointwise path
    let x = rand_vec(&mut r, 2 * 3 * 4 * 4, -1.0, 1.0);
    let w = rand_vec(&mut r, 2 * 3, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let y = g.conv2d(&t[0], &t[1], 1, 0, 1).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.mean_all(&y).unwrap()
        },
        &[(vec![2, 3, 4, 4], x), (vec![2, 3, 1, 1], w)],
        H,
        TOL,
        "conv 1x1",
    );
    // general path with stride/pad
    let x = rand_vec(&mut r, 1 * 2 * 5 * 5, -1.0, 1.0);
    let w = rand_vec(&mut r, 3 * 2 * 3 * 3, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let y = g.conv2d(&t[0], &t[1], 2, 1, 1).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.mean_all(&y).unwrap()
        },
        &[(vec![1, 2, 5, 5], x), (vec![3, 2, 3, 3], w)],
        H,
        TOL,
        "conv 3x3 s2 p1",
    );
    // depthwise path
    let x = rand_vec(&mut r, 1 * 3 * 4 * 4, -1.0, 1.0);
    let w = rand_vec(&mut r, 3 * 9, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let y = g.conv2d(&t[0], &t[1], 1, 1, 3).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.mean_all(&y).unwrap()
        },
        &[(vec![1, 3, 4, 4], x), (vec![3, 1, 3, 3], w)],
        H,
        TOL,
        "depthwise conv",
    );
}

#[test]
fn gradcheck_pooling_and_resize() {
    let mut r = rng(47);
    let x = rand_vec(&mut r, 1 * 2 * 4 * 4, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let y = g.maxpool2d(&t[0], 3, 2, 1).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[(vec![1, 2, 4, 4], x.clone())],
        H,
        TOL,
        "maxpool",
    );
    gradcheck(
        &|g, t| {
            let y = g.adaptive_avg_pool2d(&t[0], 3, 3).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[(vec![1, 2, 4, 4], x.clone())],
        H,
        TOL,
        "adaptive avg pool down",
    );
    gradcheck(
        &|g, t| {
            let y = g.adaptive_avg_pool2d(&t[0], 6, 6).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[(vec![1, 2, 4, 4], x.clone())],
        H,
        TOL,
        "adaptive avg pool up",
    );
    gradcheck(
        &|g, t| {
            let y = g.resize_bilinear(&t[0], 3, 5).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[(vec![1, 2, 4, 4], x.clone())],
        H,
        TOL,
        "bilinear resize",
    );
    gradcheck(
        &|g, t| {
            let y = g.upsample_nearest(&t[0], 2).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[(vec![1, 2, 4, 4], x)],
        H,
        TOL,
        "nearest upsample",
    );
}

#[test]
fn gradcheck_norms() {
    let mut r = rng(53);
    let x = rand_vec(&mut r, 2 * 3 * 3 * 3, -1.0, 1.0);
    let gamma = rand_vec(&mut r, 3, 0.5, 1.5);
    let beta = rand_vec(&mut r, 3, -0.3, 0.3);
    gradcheck(
        &|g, t| {
            let rm = Tensor::from_vec(vec![3], vec![0.1, -0.2, 0.3]);
            let rv = Tensor::from_vec(vec![3], vec![1.1, 0.9, 1.3]);
            let (y, _) = g
                .batchnorm2d(&t[0], &t[1], &t[2], &rm, &rv, 1e-5, BnMode::Train)
                .unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.mean_all(&y).unwrap()
        },
        &[
            (vec![2, 3, 3, 3], x.clone()),
            (vec![3], gamma.clone()),
            (vec![3], beta.clone()),
        ],
        H,
        TOL,
        "batchnorm train",
    );
    gradcheck(
        &|g, t| {
            let rm = Tensor::from_vec(vec![3], vec![0.1, -0.2, 0.3]);
            let rv = Tensor::from_vec(vec![3], vec![1.1, 0.9, 1.3]);
            let (y, _) = g
                .batchnorm2d(&t[0], &t[1], &t[2], &rm, &rv, 1e-5, BnMode::Eval)
                .unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.mean_all(&y).unwrap()
        },
        &[(vec![2, 3, 3, 3], x), (vec![3], gamma), (vec![3], beta)],
        H,
        TOL,
        "batchnorm eval",
    );
    let x = rand_vec(&mut r, 4 * 6, -1.0, 1.0);
    let gamma = rand_vec(&mut r, 6, 0.5, 1.5);
    let beta = rand_vec(&mut r, 6, -0.3, 0.3);
    gradcheck(
        &|g, t| {
            let y = g.layernorm_last(&t[0], &t[1], &t[2], 1e-5).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.mean_all(&y).unwrap()
        },
        &[
            (vec![4, 6], x.clone()),
            (vec![6], gamma.clone()),
            (vec![6], beta),
        ],
        H,
        TOL,
        "layernorm",
    );
    gradcheck(
        &|g, t| {
            let y = g.rmsnorm_last(&t[0], &t[1], 1e-6).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.mean_all(&y).unwrap()
        },
        &[(vec![4, 6], x), (vec![6], gamma)],
        H,
        TOL,
        "rmsnorm",
    );
}

#[test]
fn gradcheck_shape_ops() {
    let mut r = rng(59);
    let x = rand_vec(&mut r, 2 * 4 * 3, -1.0, 1.0);
    let wsum = rand_vec(&mut r, 2 * 4 * 3, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let y = g.transpose_12(&t[0]).unwrap();
            let y = g.reshape(&y, vec![2, 4, 3]).unwrap();
            let y = g.gather_tokens(&y, &[3, 1, 0, 2]).unwrap();
            let a = g.narrow_tokens(&y, 0, 2).unwrap();
            let b = g.narrow_tokens(&y, 2, 2).unwrap();
            let y = g.concat_tokens(&[&b, &a]).unwrap();
            let c = g.narrow_last(&y, 0, 2).unwrap();
            let d = g.narrow_last(&y, 2, 1).unwrap();
            let y = g.concat_last(&[&d, &c]).unwrap();
            let y = g.mul(&y, &t[1]).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[(vec![2, 3, 4], x), (vec![2, 4, 3], wsum)],
        H,
        TOL,
        "transpose/gather/narrow/concat",
    );
}

/// The composed pipeline named in the spec-level gradient example:
/// conv2d -> rmsnorm -> cross-entropy on a random 64-bit instance.
#[test]
fn gradcheck_conv_rmsnorm_cross_entropy_pipeline() {
    let mut r = rng(61);
    let x = rand_vec(&mut r, 2 * 2 * 4 * 4, -1.0, 1.0);
    let w = rand_vec(&mut r, 3 * 2 * 3 * 3, -0.6, 0.6);
    let gamma = rand_vec(&mut r, 12, 0.7, 1.3);
    let head = rand_vec(&mut r, 12 * 4, -0.5, 0.5);
    gradcheck(
        &|g, t| {
            let y = g.conv2d(&t[0], &t[1], 1, 0, 1).unwrap(); // [2,3,2,2]
            let y = g.reshape(&y, vec![2, 12]).unwrap();
            let y = g.rmsnorm_last(&y, &t[2], 1e-6).unwrap();
            let logits = g.matmul(&y, &t[3]).unwrap();
            g.cross_entropy(&logits, &[Target::Hard(1), Target::Hard(3)]).unwrap()
        },
        &[
            (vec![2, 2, 4, 4], x),
            (vec![3, 2, 3, 3], w),
            (vec![12], gamma),
            (vec![12, 4], head),
        ],
        H,
        TOL,
        "conv->rmsnorm->cross_entropy",
    );
}
