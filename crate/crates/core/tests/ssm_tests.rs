//! Selective SSM tests: projection oracle, closed-form ZOH values,
//! recurrence examples, the recurrence/convolution equivalence, causality,
//! stability and gradient checks including fused-vs-composed agreement.

mod common;

use common::{assert_all_close, assert_close, gradcheck, rand_vec, rng};
use glvm_core::ssm::{
    selective_project, selective_scan, softplus_vec, ssm_conv, ssm_kernel, ssm_scan,
    zoh_discretize, zoh_scalar, SsmParams,
};
use glvm_core::{Graph, Tensor, TensorError};
use rand::Rng;

// ------------------------------------------------------ selective_project

fn zero_params(dim: usize, state: usize) -> SsmParams<f64> {
    SsmParams {
        a: glvm_core::ssm::ladder_a(dim, state),
        w_b: Tensor::param(vec![dim, state], vec![0.0; dim * state]),
        w_c: Tensor::param(vec![dim, state], vec![0.0; dim * state]),
        w_dt: Tensor::param(vec![dim, dim], vec![0.0; dim * dim]),
        bias_dt: Tensor::param(vec![dim], vec![0.0; dim]),
        state,
        dim,
    }
}

#[test]
fn project_zero_input_gives_ln2_delta() {
    let g = Graph::inference();
    let p = zero_params(3, 2);
    let x = Tensor::from_vec(vec![4, 3], vec![0.0; 12]);
    let (b, c, dt) = selective_project(&g, &x, &p).unwrap();
    assert_eq!(b.to_vec(), vec![0.0; 8]);
    assert_eq!(c.to_vec(), vec![0.0; 8]);
    for v in dt.to_vec() {
        assert_close(v, (2.0f64).ln(), 1e-12, "softplus(0) = ln 2");
    }
}

#[test]
fn project_large_bias_hits_softplus_asymptote() {
    let g = Graph::inference();
    let dim = 3;
    let mut p = zero_params(dim, 2);
    // identity-like W_dt with a large positive bias
    let mut wdt = vec![0.0; dim * dim];
    for i in 0..dim {
        wdt[i * dim + i] = 1.0;
    }
    p.w_dt = Tensor::param(vec![dim, dim], wdt);
    p.bias_dt = Tensor::param(vec![dim], vec![20.0; dim]);
    let xv = vec![0.5, -1.0, 2.0];
    let x = Tensor::from_vec(vec![1, 3], xv.clone());
    let (_, _, dt) = selective_project(&g, &x, &p).unwrap();
    for (got, &xi) in dt.to_vec().iter().zip(&xv) {
        assert_close(*got, xi + 20.0, 1e-6, "softplus asymptote equals pre-activation");
    }
}

#[test]
fn project_matches_matmul_softplus_oracle() {
    let mut r = rng(71);
    let (l, dim, state) = (5, 4, 3);
    let p = SsmParams::<f64>::init(dim, state, &mut r);
    let xv = rand_vec(&mut r, l * dim, -1.0, 1.0);
    let g = Graph::inference();
    let (b, c, dt) = selective_project(&g, &Tensor::from_vec(vec![l, dim], xv.clone()), &p).unwrap();
    // independent oracle: direct matmul + softplus
    let matmul = |x: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
        let mut out = vec![0.0; l * cols];
        for i in 0..l {
            for j in 0..cols {
                for k in 0..dim {
                    out[i * cols + j] += x[i * dim + k] * w[k * cols + j];
                }
            }
        }
        out
    };
    let wb = p.w_b.to_vec();
    let wc = p.w_c.to_vec();
    let wdt = p.w_dt.to_vec();
    let bias = p.bias_dt.to_vec();
    assert_all_close(&b.to_vec(), &matmul(&xv, &wb, state), 1e-6, "B projection");
    assert_all_close(&c.to_vec(), &matmul(&xv, &wc, state), 1e-6, "C projection");
    let mut pre = matmul(&xv, &wdt, dim);
    for i in 0..l {
        for j in 0..dim {
            pre[i * dim + j] += bias[j];
        }
    }
    assert_all_close(&dt.to_vec(), &softplus_vec(&pre), 1e-6, "delta projection");
    for v in dt.to_vec() {
        assert!(v > 0.0, "delta strictly positive");
    }
}

// --------------------------------------------------------- zoh_discretize

#[test]
fn zoh_scalar_analytic_values() {
    // A = -1, dt = ln 2 -> abar = 1/2
    let (ab, _) = zoh_scalar(-1.0f64, 1.0, (2.0f64).ln());
    assert_close(ab, 0.5, 1e-12, "abar = e^{-ln 2}");
    // A = -1, B = 1, dt = 1 -> abar = e^{-1}, bbar = 1 - e^{-1}
    let (ab, bb) = zoh_scalar(-1.0f64, 1.0, 1.0);
    assert_close(ab, (-1.0f64).exp(), 1e-12, "abar = e^{-1}");
    assert_close(bb, 1.0 - (-1.0f64).exp(), 1e-12, "bbar = 1 - e^{-1}");
}

#[test]
fn zoh_series_limit_for_tiny_a() {
    // A -> 0: bbar -> dt * b
    let (ab, bb) = zoh_scalar(1e-9f64, 3.0, 0.5);
    assert_close(ab, 1.0, 1e-9, "abar -> 1");
    assert_close(bb, 0.5 * 3.0, 1e-9, "bbar -> dt*b in the series branch");
    // at the switch point |x| = 1e-4 the truncated series misses the x^2/6
    // term, a relative error of ~1.67e-9
    let (dt, b) = (0.5f64, 2.0f64);
    for sign in [-1.0f64, 1.0] {
        let a = sign * 1e-4 / dt;
        let x = dt * a;
        let series = dt * b * (1.0 + x / 2.0);
        let closed = (x.exp() - 1.0) / a * b;
        let rel = ((series - closed) / closed).abs();
        assert!(rel < 2e-9, "series error {rel} at the switch point");
    }
}

#[test]
fn zoh_op_rejects_nonpositive_delta() {
    let g = Graph::inference();
    let a = Tensor::from_vec(vec![1, 1], vec![-1.0]);
    let b = Tensor::from_vec(vec![1], vec![1.0]);
    let dt = Tensor::from_vec(vec![1], vec![0.0]);
    assert!(matches!(
        zoh_discretize(&g, &a, &b, &dt),
        Err(TensorError::InvalidParameter { .. })
    ));
}

#[test]
fn zoh_op_matches_scalar_formula() {
    let mut r = rng(73);
    let (l, d, v) = (3, 2, 4);
    let av = rand_vec(&mut r, d * v, -3.0, -0.1);
    let bv = rand_vec(&mut r, l * v, -1.0, 1.0);
    let dtv = rand_vec(&mut r, l * d, 0.01, 1.0);
    let g = Graph::inference();
    let (abar, bbar) = zoh_discretize(
        &g,
        &Tensor::from_vec(vec![d, v], av.clone()),
        &Tensor::from_vec(vec![l, v], bv.clone()),
        &Tensor::from_vec(vec![l, d], dtv.clone()),
    )
    .unwrap();
    let (ab, bb) = (abar.to_vec(), bbar.to_vec());
    for t in 0..l {
        for di in 0..d {
            for vi in 0..v {
                let (ea, eb) = zoh_scalar(av[di * v + vi], bv[t * v + vi], dtv[t * d + di]);
                assert_close(ab[(t * d + di) * v + vi], ea, 1e-12, "abar entry");
                assert_close(bb[(t * d + di) * v + vi], eb, 1e-12, "bbar entry");
            }
        }
    }
}

// --------------------------------------------------------------- ssm_scan

#[test]
fn scan_memoryless_when_abar_zero() {
    let mut r = rng(79);
    let (l, d, v) = (5, 2, 3);
    let xv = rand_vec(&mut r, l * d, -1.0, 1.0);
    let bbv = rand_vec(&mut r, l * d * v, -1.0, 1.0);
    let cv = rand_vec(&mut r, l * v, -1.0, 1.0);
    let g = Graph::inference();
    let y = ssm_scan(
        &g,
        &Tensor::from_vec(vec![l, d], xv.clone()),
        &Tensor::from_vec(vec![l, d, v], vec![0.0; l * d * v]),
        &Tensor::from_vec(vec![l, d, v], bbv.clone()),
        &Tensor::from_vec(vec![l, v], cv.clone()),
    )
    .unwrap();
    let yd = y.to_vec();
    for t in 0..l {
        for di in 0..d {
            let mut want = 0.0;
            for vi in 0..v {
                want += cv[t * v + vi] * bbv[(t * d + di) * v + vi] * xv[t * d + di];
            }
            assert_close(yd[t * d + di], want, 1e-12, "y_t = C_t Bbar_t x_t");
        }
    }
}

#[test]
fn scan_integrator_cumulative_sum() {
    let g = Graph::inference();
    let y = ssm_scan(
        &g,
        &Tensor::from_vec(vec![3, 1], vec![1.0, 1.0, 1.0]),
        &Tensor::from_vec(vec![1, 1], vec![1.0]),
        &Tensor::from_vec(vec![1, 1], vec![1.0]),
        &Tensor::from_vec(vec![1], vec![1.0]),
    )
    .unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0], "integrator is a cumulative sum");
}

#[test]
fn scan_empty_sequence_gives_empty_output() {
    let g = Graph::inference();
    let y = ssm_scan(
        &g,
        &Tensor::from_vec(vec![0, 2], vec![]),
        &Tensor::from_vec(vec![2, 3], vec![0.5; 6]),
        &Tensor::from_vec(vec![2, 3], vec![0.5; 6]),
        &Tensor::from_vec(vec![3], vec![1.0; 3]),
    )
    .unwrap();
    assert_eq!(y.shape(), &[0, 2]);
}

// --------------------------------------------------------------- ssm_conv

#[test]
fn conv_kernel_collapses_when_abar_zero() {
    let (d, v) = (2, 3);
    let abar = Tensor::from_vec(vec![d, v], vec![0.0; d * v]);
    let bbar = Tensor::from_vec(vec![d, v], vec![0.3; d * v]);
    let c = Tensor::from_vec(vec![v], vec![2.0; v]);
    let k = ssm_kernel(&abar, &bbar, &c, 4).unwrap();
    for di in 0..d {
        assert_close(k[di], 2.0 * 0.3 * v as f64, 1e-12, "K_0 = C Bbar");
    }
    for q in 1..4 {
        for di in 0..d {
            assert_eq!(k[q * d + di], 0.0, "higher taps vanish");
        }
    }
}

#[test]
fn conv_impulse_response_reproduces_kernel() {
    let mut r = rng(83);
    let (l, d, v) = (6, 2, 3);
    let abar = rand_vec(&mut r, d * v, 0.1, 0.9);
    let bbar = rand_vec(&mut r, d * v, -1.0, 1.0);
    let cv = rand_vec(&mut r, v, -1.0, 1.0);
    let mut x = vec![0.0; l * d];
    for di in 0..d {
        x[di] = 1.0; // unit impulse at t = 0 in every channel
    }
    let at = Tensor::from_vec(vec![d, v], abar);
    let bt = Tensor::from_vec(vec![d, v], bbar);
    let ct = Tensor::from_vec(vec![v], cv);
    let y = ssm_conv(&Tensor::from_vec(vec![l, d], x), &at, &bt, &ct).unwrap();
    let k = ssm_kernel(&at, &bt, &ct, l).unwrap();
    assert_all_close(&y.to_vec(), &k, 1e-12, "impulse response equals the kernel");
}

#[test]
fn conv_rejects_per_timestep_parameters() {
    let x = Tensor::from_vec(vec![4, 2], vec![0.0; 8]);
    let abar3 = Tensor::from_vec(vec![4, 2, 3], vec![0.1; 24]);
    let bbar = Tensor::from_vec(vec![2, 3], vec![0.1; 6]);
    let c = Tensor::from_vec(vec![3], vec![1.0; 3]);
    assert!(matches!(
        ssm_conv(&x, &abar3, &bbar, &c),
        Err(TensorError::NotTimeInvariant { .. })
    ));
}

// ----------------------------------------- recurrence/convolution duality

fn random_lti_instance(
    r: &mut rand_chacha::ChaCha8Rng,
    l: usize,
    d: usize,
    v: usize,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    // stable abar in (0, 1), as produced by negative A and positive delta
    let x = Tensor::from_vec(vec![l, d], rand_vec(r, l * d, -1.0, 1.0));
    let abar = Tensor::from_vec(vec![d, v], rand_vec(r, d * v, 0.05, 0.95));
    let bbar = Tensor::from_vec(vec![d, v], rand_vec(r, d * v, -1.0, 1.0));
    let c = Tensor::from_vec(vec![v], rand_vec(r, v, -1.0, 1.0));
    (x, abar, bbar, c)
}

#[test]
fn lti_scan_equals_conv() {
    let mut r = rng(89);
    for _ in 0..100 {
        let l = r.random_range(1..=32);
        let d = r.random_range(1..=4);
        let v = r.random_range(1..=8);
        let (x, abar, bbar, c) = random_lti_instance(&mut r, l, d, v);
        let g = Graph::inference();
        let ys = ssm_scan(&g, &x, &abar, &bbar, &c).unwrap().to_vec();
        let yc = ssm_conv(&x, &abar, &bbar, &c).unwrap().to_vec();
        for (a, b) in ys.iter().zip(&yc) {
            assert!((a - b).abs() <= 1e-5, "scan {a} vs conv {b}");
        }
    }
}

#[test]
fn causality_future_inputs_do_not_change_past_outputs() {
    let mut r = rng(97);
    let (l, d, v) = (8, 2, 3);
    let (x, abar, bbar, c) = random_lti_instance(&mut r, l, d, v);
    let g = Graph::inference();
    let y0 = ssm_scan(&g, &x, &abar, &bbar, &c).unwrap().to_vec();
    for t in 1..l {
        let mut pert = x.to_vec();
        for di in 0..d {
            pert[t * d + di] += 3.5;
        }
        let yp = ssm_scan(&g, &Tensor::from_vec(vec![l, d], pert), &abar, &bbar, &c)
            .unwrap()
            .to_vec();
        for s in 0..t {
            for di in 0..d {
                assert_eq!(
                    y0[s * d + di],
                    yp[s * d + di],
                    "perturbing x_{t} changed y_{s}"
                );
            }
        }
    }
}

#[test]
fn stability_scalar_impulse_response_non_increasing() {
    // scalar diagonal case: negative A, bounded positive delta
    let mut r = rng(101);
    for _ in 0..20 {
        let a: f64 = -r.random_range(0.2..4.0);
        let dt: f64 = r.random_range(0.05..1.5);
        let (ab, bb) = zoh_scalar(a, 1.0, dt);
        let abar = Tensor::from_vec(vec![1, 1], vec![ab]);
        let bbar = Tensor::from_vec(vec![1, 1], vec![bb]);
        let c = Tensor::from_vec(vec![1], vec![1.0]);
        let k = ssm_kernel(&abar, &bbar, &c, 16).unwrap();
        for q in 1..16 {
            assert!(
                k[q].abs() <= k[q - 1].abs() + 1e-15,
                "impulse response grew at lag {q}: {} > {}",
                k[q].abs(),
                k[q - 1].abs()
            );
        }
    }
}

// ----------------------------------------------------------------- grads

#[test]
fn gradcheck_ssm_scan() {
    let mut r = rng(103);
    let (l, d, v) = (5, 2, 3);
    let x = rand_vec(&mut r, l * d, -1.0, 1.0);
    let abar = rand_vec(&mut r, l * d * v, 0.05, 0.95);
    let bbar = rand_vec(&mut r, l * d * v, -1.0, 1.0);
    let c = rand_vec(&mut r, l * v, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let y = ssm_scan(g, &t[0], &t[1], &t[2], &t[3]).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[
            (vec![l, d], x),
            (vec![l, d, v], abar),
            (vec![l, d, v], bbar),
            (vec![l, v], c),
        ],
        1e-5,
        1e-4,
        "ssm_scan",
    );
}

#[test]
fn gradcheck_zoh_then_scan() {
    let mut r = rng(107);
    let (l, d, v) = (4, 2, 2);
    let x = rand_vec(&mut r, l * d, -1.0, 1.0);
    let b = rand_vec(&mut r, l * v, -1.0, 1.0);
    // pre-softplus delta so positivity is guaranteed inside the graph
    let dt_pre = rand_vec(&mut r, l * d, -1.0, 1.0);
    let c = rand_vec(&mut r, l * v, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let a = glvm_core::ssm::ladder_a::<f64>(d, v);
            let dt = g.softplus(&t[1]).unwrap();
            let (abar, bbar) = zoh_discretize(g, &a, &t[2], &dt).unwrap();
            let y = ssm_scan(g, &t[0], &abar, &bbar, &t[3]).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[
            (vec![l, d], x),
            (vec![l, d], dt_pre),
            (vec![l, v], b),
            (vec![l, v], c),
        ],
        1e-5,
        1e-4,
        "zoh+scan",
    );
}

#[test]
fn gradcheck_fused_selective_scan() {
    let mut r = rng(109);
    let (n, l, d, v) = (2, 4, 3, 2);
    let u = rand_vec(&mut r, n * l * d, -1.0, 1.0);
    let dt_pre = rand_vec(&mut r, n * l * d, -1.0, 1.0);
    let bm = rand_vec(&mut r, n * l * v, -1.0, 1.0);
    let cm = rand_vec(&mut r, n * l * v, -1.0, 1.0);
    gradcheck(
        &|g, t| {
            let a = glvm_core::ssm::ladder_a::<f64>(d, v);
            let dt = g.softplus(&t[1]).unwrap();
            let y = selective_scan(g, &t[0], &dt, &t[2], &t[3], &a).unwrap();
            let y = g.mul(&y, &y).unwrap();
            g.sum_all(&y).unwrap()
        },
        &[
            (vec![n, l, d], u),
            (vec![n, l, d], dt_pre),
            (vec![n, l, v], bm),
            (vec![n, l, v], cm),
        ],
        1e-5,
        1e-4,
        "fused selective scan",
    );
}

/// The fused kernel must agree with the composed zoh+scan route on values
/// and on gradients; a non-ladder A exercises the general exp path.
#[test]
fn fused_equals_composed_values_and_grads() {
    let mut r = rng(113);
    for ladder in [true, false] {
        let (l, d, v) = (6, 3, 4);
        let u = rand_vec(&mut r, l * d, -1.0, 1.0);
        let dtv = rand_vec(&mut r, l * d, 0.01, 1.2);
        let bm = rand_vec(&mut r, l * v, -1.0, 1.0);
        let cm = rand_vec(&mut r, l * v, -1.0, 1.0);
        let av = if ladder {
            let mut a = Vec::new();
            for _ in 0..d {
                for vi in 0..v {
                    a.push(-((vi + 1) as f64));
                }
            }
            a
        } else {
            rand_vec(&mut r, d * v, -3.0, -0.1)
        };

        let run = |fused: bool| -> (Vec<f64>, Vec<Vec<f64>>) {
            let g = Graph::new();
            let ut = Tensor::param(vec![1, l, d], u.clone());
            let dt = Tensor::param(vec![1, l, d], dtv.clone());
            let bt = Tensor::param(vec![1, l, v], bm.clone());
            let ct = Tensor::param(vec![1, l, v], cm.clone());
            let a = Tensor::buffer(vec![d, v], av.clone());
            let y = if fused {
                selective_scan(&g, &ut, &dt, &bt, &ct, &a).unwrap()
            } else {
                let u2 = g.reshape(&ut, vec![l, d]).unwrap();
                let dt2 = g.reshape(&dt, vec![l, d]).unwrap();
                let b2 = g.reshape(&bt, vec![l, v]).unwrap();
                let c2 = g.reshape(&ct, vec![l, v]).unwrap();
                let (abar, bbar) = zoh_discretize(&g, &a, &b2, &dt2).unwrap();
                let y = ssm_scan(&g, &u2, &abar, &bbar, &c2).unwrap();
                g.reshape(&y, vec![1, l, d]).unwrap()
            };
            let loss = g.sum_all(&g.mul(&y, &y).unwrap()).unwrap();
            g.backward(&loss).unwrap();
            (
                y.to_vec(),
                vec![
                    ut.grad_or_zeros(),
                    dt.grad_or_zeros(),
                    bt.grad_or_zeros(),
                    ct.grad_or_zeros(),
                ],
            )
        };
        let (yf, gf) = run(true);
        let (yc, gc) = run(false);
        assert_all_close(&yf, &yc, 1e-10, "fused vs composed values");
        for (a, b) in gf.iter().zip(&gc) {
            assert_all_close(a, b, 1e-8, "fused vs composed grads");
        }
    }
}
