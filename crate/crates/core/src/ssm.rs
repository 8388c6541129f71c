//! Selective state-space core.
//!
//! The continuous system h'(t) = A h(t) + B x(t), y(t) = C h(t) is run per
//! channel with a diagonal state of size V. Zero-order-hold discretization
//! turns (A, B) into per-step (Abar, Bbar); the selective form derives B, C
//! and the step size from the input itself. `ssm_scan` is the sequential
//! recurrence, `ssm_conv` the equivalent causal convolution for the
//! time-invariant case, and `selective_scan` the fused training path that
//! discretizes and scans in one op without materializing Abar/Bbar.

use std::rc::Rc;

use rand::Rng;

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::ops::act::{sigmoid_scalar, softplus_scalar};
use crate::tensor::{Graph, Tensor};

/// Threshold on |delta * a| below which Bbar switches to its series form
/// to avoid the 0/0 singularity. At the switch point the relative error of
/// the truncated series is below 1e-9.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

/// Discretized transition for one scalar diagonal entry:
/// abar = exp(dt*a), bbar = (exp(dt*a) - 1)/a * b, with the series branch
/// bbar ~= dt*b*(1 + dt*a/2) when |dt*a| is tiny (including a = 0).
#[inline(always)]
pub fn zoh_scalar<E: Elem>(a: E, b: E, dt: E) -> (E, E) {
    let x = dt * a;
    let abar = x.exp();
    let bbar = if x.abs().to_f64() < ZOH_SERIES_THRESHOLD {
        dt * b * (E::ONE + x * E::from_f64(0.5))
    } else {
        (abar - E::ONE) / a * b
    };
    (abar, bbar)
}

/// d(bbar)/d(b): the factor multiplying b in `zoh_scalar`.
#[inline(always)]
fn zoh_b_coeff<E: Elem>(a: E, dt: E) -> E {
    let x = dt * a;
    if x.abs().to_f64() < ZOH_SERIES_THRESHOLD {
        dt * (E::ONE + x * E::from_f64(0.5))
    } else {
        (x.exp() - E::ONE) / a
    }
}

/// Parameters of one selective SSM acting on sequences of width `dim`.
///
/// `a` is the continuous state matrix [dim, V], one diagonal of V states per
/// channel, initialized to the negative integer ladder a[d][v] = -(v+1) and
/// kept fixed. `w_b`, `w_c` project the input to B, C in R^{L x V}; `w_dt`
/// and `bias_dt` produce the step sizes, which pass through SoftPlus so that
/// every delta is strictly positive.
pub struct SsmParams<E: Elem> {
    pub a: Tensor<E>,
    pub w_b: Tensor<E>,
    pub w_c: Tensor<E>,
    pub w_dt: Tensor<E>,
    pub bias_dt: Tensor<E>,
    pub state: usize,
    pub dim: usize,
}

/// A(d, v) = -(v + 1), identical for every channel. Real parts are negative
/// by construction, so the recurrence is stable for any positive delta.
pub fn ladder_a<E: Elem>(dim: usize, state: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(dim * state);
    for _ in 0..dim {
        for v in 0..state {
            data.push(E::from_f64(-((v + 1) as f64)));
        }
    }
    Tensor::buffer(vec![dim, state], data)
}

/// Inverse softplus of a step size drawn log-uniformly from [1e-3, 1e-1],
/// the usual initialization for the delta bias.
pub fn init_dt_bias<E: Elem>(dim: usize, rng: &mut impl Rng) -> Tensor<E> {
    let data: Vec<E> = (0..dim)
        .map(|_| {
            let u: f64 = rng.random::<f64>();
            let dt = ((1e-3f64).ln() + u * ((1e-1f64).ln() - (1e-3f64).ln())).exp();
            E::from_f64((dt.exp() - 1.0).ln())
        })
        .collect();
    Tensor::param(vec![dim], data)
}

impl<E: Elem> SsmParams<E> {
    pub fn init(dim: usize, state: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (dim as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| {
            let data: Vec<E> = (0..rows * cols)
                .map(|_| E::from_f64(rng.random_range(-k..k)))
                .collect();
            Tensor::param(vec![rows, cols], data)
        };
        let w_b = mat(dim, state);
        let w_c = mat(dim, state);
        let w_dt = mat(dim, dim);
        SsmParams {
            a: ladder_a(dim, state),
            w_b,
            w_c,
            w_dt,
            bias_dt: init_dt_bias(dim, rng),
            state,
            dim,
        }
    }
}

/// Input-dependent parameter projections: B = x W_B, C = x W_C,
/// delta = SoftPlus(x W_dt + bias). Every delta entry is strictly positive.
pub fn selective_project<E: Elem>(
    g: &Graph<E>,
    x: &Tensor<E>,
    p: &SsmParams<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let b = g.matmul(x, &p.w_b)?;
    let c = g.matmul(x, &p.w_c)?;
    let pre = g.bias_last(&g.matmul(x, &p.w_dt)?, &p.bias_dt)?;
    let dt = g.softplus(&pre)?;
    Ok((b, c, dt))
}

/// Zero-order-hold discretization as a differentiable op.
///
/// Shapes: a [D, V]; delta [L, D] (or [D], treated as L = 1); b [L, V]
/// (or [V]). Returns (abar, bbar), both [L, D, V]. Gradients flow to b and
/// delta; `a` is a fixed buffer.
pub fn zoh_discretize<E: Elem>(
    g: &Graph<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
    delta: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (d, v) = match a.shape() {
        [d, v] => (*d, *v),
        other => {
            return Err(TensorError::param(
                "zoh_discretize",
                format!("A must be [D, V], got {other:?}"),
            ))
        }
    };
    let (l, dt_stride) = match delta.shape() {
        [dd] if *dd == d => (1usize, 0usize),
        [l, dd] if *dd == d => (*l, d),
        other => {
            return Err(TensorError::param(
                "zoh_discretize",
                format!("delta must be [L, {d}] or [{d}], got {other:?}"),
            ))
        }
    };
    let b_stride = match b.shape() {
        [vv] if *vv == v => 0usize,
        [ll, vv] if *vv == v && *ll == l => v,
        other => {
            return Err(TensorError::param(
                "zoh_discretize",
                format!("B must be [L, {v}] or [{v}], got {other:?}"),
            ))
        }
    };
    if a.requires_grad() {
        return Err(TensorError::param(
            "zoh_discretize",
            "gradients w.r.t. A are not supported; A is a fixed buffer",
        ));
    }
    let (da, db, ddt) = (a.data_rc(), b.data_rc(), delta.data_rc());
    for &x in ddt.iter() {
        if !(x > E::ZERO) {
            return Err(TensorError::param(
                "zoh_discretize",
                format!("delta must be strictly positive, got {x}"),
            ));
        }
    }
    let mut abar = vec![E::ZERO; l * d * v];
    let mut bbar = vec![E::ZERO; l * d * v];
    for t in 0..l {
        for di in 0..d {
            let dt = ddt[t * dt_stride + di];
            for vi in 0..v {
                let (ab, bb) = zoh_scalar(da[di * v + vi], db[t * b_stride + vi], dt);
                abar[(t * d + di) * v + vi] = ab;
                bbar[(t * d + di) * v + vi] = bb;
            }
        }
    }
    let tracks = g.tracks(&[b, delta]);
    let abar_t = Tensor::result(vec![l, d, v], abar, tracks);
    let bbar_t = Tensor::result(vec![l, d, v], bbar, tracks);
    if tracks {
        let (b2, dt2) = (b.clone(), delta.clone());
        let (abar2, bbar2) = (abar_t.clone(), bbar_t.clone());
        let (da, db) = (da.clone(), db.clone());
        let ddt = ddt.clone();
        g.record(move || {
            let dab = abar2.grad();
            let dbb = bbar2.grad();
            if dab.is_none() && dbb.is_none() {
                return;
            }
            let abv = abar2.data_rc();
            // d(abar)/d(dt) = a * abar ; d(bbar)/d(dt) = b * abar ;
            // d(bbar)/d(b) = zoh_b_coeff(a, dt)
            dt2.accum_grad(|gdt| {
                for t in 0..l {
                    for di in 0..d {
                        let mut acc = E::ZERO;
                        for vi in 0..v {
                            let i = (t * d + di) * v + vi;
                            let av = da[di * v + vi];
                            let bv = db[t * b_stride + vi];
                            if let Some(ref dab) = dab {
                                acc = (dab[i] * av).mul_add(abv[i], acc);
                            }
                            if let Some(ref dbb) = dbb {
                                acc = (dbb[i] * bv).mul_add(abv[i], acc);
                            }
                        }
                        gdt[t * dt_stride + di] += acc;
                    }
                }
            });
            if let Some(ref dbb) = dbb {
                b2.accum_grad(|gb| {
                    for t in 0..l {
                        for di in 0..d {
                            let dt = ddt[t * dt_stride + di];
                            for vi in 0..v {
                                let coeff = zoh_b_coeff(da[di * v + vi], dt);
                                gb[t * b_stride + vi] += dbb[(t * d + di) * v + vi] * coeff;
                            }
                        }
                    }
                });
            }
        });
    }
    Ok((abar_t, bbar_t))
}

/// Sequential scan h_t = Abar_t h_{t-1} + Bbar_t x_t, y_t = C_t h_t with
/// h_0 = 0. Accepts per-timestep ([L,D,V]) or time-invariant ([D,V])
/// operators, and C as [L,V] or [V]. Gradient flows through the whole
/// recurrence to every input.
pub fn ssm_scan<E: Elem>(
    g: &Graph<E>,
    x: &Tensor<E>,
    abar: &Tensor<E>,
    bbar: &Tensor<E>,
    c: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (l, d) = match x.shape() {
        [l, d] => (*l, *d),
        other => {
            return Err(TensorError::param(
                "ssm_scan",
                format!("x must be [L, D], got {other:?}"),
            ))
        }
    };
    if l == 0 {
        return Ok(Tensor::result(vec![0, d], vec![], false));
    }
    let v = match abar.shape() {
        [dd, v] if *dd == d => *v,
        [ll, dd, v] if *dd == d && *ll == l => *v,
        other => {
            return Err(TensorError::param(
                "ssm_scan",
                format!("Abar must be [{l},{d},V] or [{d},V], got {other:?}"),
            ))
        }
    };
    let ab_step = if abar.rank() == 3 { d * v } else { 0 };
    let bb_step = match bbar.shape() {
        [dd, vv] if *dd == d && *vv == v => 0,
        [ll, dd, vv] if *ll == l && *dd == d && *vv == v => d * v,
        other => {
            return Err(TensorError::param(
                "ssm_scan",
                format!("Bbar must match Abar layout, got {other:?}"),
            ))
        }
    };
    let c_step = match c.shape() {
        [vv] if *vv == v => 0,
        [ll, vv] if *ll == l && *vv == v => v,
        other => {
            return Err(TensorError::param(
                "ssm_scan",
                format!("C must be [{l},{v}] or [{v}], got {other:?}"),
            ))
        }
    };
    let (dx, dab, dbb, dc) = (x.data_rc(), abar.data_rc(), bbar.data_rc(), c.data_rc());
    let mut y = vec![E::ZERO; l * d];
    // states kept for backward: hs[t] is h after step t
    let mut hs = vec![E::ZERO; l * d * v];
    let mut h = vec![E::ZERO; d * v];
    for t in 0..l {
        for di in 0..d {
            let xv = dx[t * d + di];
            let mut acc = E::ZERO;
            for vi in 0..v {
                let i = di * v + vi;
                let ab = dab[t * ab_step + i];
                let bb = dbb[t * bb_step + i];
                let hv = ab.mul_add(h[i], bb * xv);
                h[i] = hv;
                acc = dc[t * c_step + vi].mul_add(hv, acc);
            }
            y[t * d + di] = acc;
        }
        hs[t * d * v..(t + 1) * d * v].copy_from_slice(&h);
    }
    let tracks = g.tracks(&[x, abar, bbar, c]);
    let yt = Tensor::result(vec![l, d], y, tracks);
    if tracks {
        let (x2, ab2, bb2, c2, y2) = (x.clone(), abar.clone(), bbar.clone(), c.clone(), yt.clone());
        let hs = Rc::new(hs);
        g.record(move || {
            y2.with_grad(|dy| {
                let (dx, dab, dbb, dc) = (x2.data_rc(), ab2.data_rc(), bb2.data_rc(), c2.data_rc());
                let mut gx = vec![E::ZERO; l * d];
                let mut gab = vec![E::ZERO; dab.len()];
                let mut gbb = vec![E::ZERO; dbb.len()];
                let mut gc = vec![E::ZERO; dc.len()];
                let mut dh = vec![E::ZERO; d * v];
                for t in (0..l).rev() {
                    for di in 0..d {
                        let dyv = dy[t * d + di];
                        let xv = dx[t * d + di];
                        let mut gx_acc = E::ZERO;
                        for vi in 0..v {
                            let i = di * v + vi;
                            let ht = hs[t * d * v + i];
                            let hprev = if t > 0 { hs[(t - 1) * d * v + i] } else { E::ZERO };
                            // from y_t = sum_v c h_t
                            gc[t * c_step + vi] = ht.mul_add(dyv, gc[t * c_step + vi]);
                            let dhv = dh[i] + dc[t * c_step + vi] * dyv;
                            // from h_t = ab h_{t-1} + bb x_t
                            gab[t * ab_step + i] = dhv.mul_add(hprev, gab[t * ab_step + i]);
                            gbb[t * bb_step + i] = dhv.mul_add(xv, gbb[t * bb_step + i]);
                            gx_acc = dbb[t * bb_step + i].mul_add(dhv, gx_acc);
                            dh[i] = dab[t * ab_step + i] * dhv;
                        }
                        gx[t * d + di] = gx_acc;
                    }
                }
                x2.accum_grad(|go| go.iter_mut().zip(&gx).for_each(|(g, &d)| *g += d));
                ab2.accum_grad(|go| go.iter_mut().zip(&gab).for_each(|(g, &d)| *g += d));
                bb2.accum_grad(|go| go.iter_mut().zip(&gbb).for_each(|(g, &d)| *g += d));
                c2.accum_grad(|go| go.iter_mut().zip(&gc).for_each(|(g, &d)| *g += d));
            });
        });
    }
    Ok(yt)
}

/// Convolutional form of the LTI system: y = x * Kbar with the causal kernel
/// Kbar_q = C Abar^q Bbar, per channel. Only time-invariant operators are
/// accepted; per-timestep (selective) parameters are a usage error.
pub fn ssm_conv<E: Elem>(
    x: &Tensor<E>,
    abar: &Tensor<E>,
    bbar: &Tensor<E>,
    c: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (l, d) = match x.shape() {
        [l, d] => (*l, *d),
        other => {
            return Err(TensorError::param(
                "ssm_conv",
                format!("x must be [L, D], got {other:?}"),
            ))
        }
    };
    for (lti_rank, t) in [(2usize, abar), (2, bbar), (1, c)] {
        if t.rank() != lti_rank {
            return Err(TensorError::NotTimeInvariant {
                op: "ssm_conv",
                shape: t.shape().to_vec(),
            });
        }
    }
    let v = match abar.shape() {
        [dd, v] if *dd == d => *v,
        other => {
            return Err(TensorError::param(
                "ssm_conv",
                format!("Abar must be [{d}, V], got {other:?}"),
            ))
        }
    };
    if bbar.shape() != [d, v] || c.shape() != [v] {
        return Err(TensorError::param(
            "ssm_conv",
            format!(
                "Bbar {:?} / C {:?} inconsistent with Abar [{d}, {v}]",
                bbar.shape(),
                c.shape()
            ),
        ));
    }
    let (dx, dab, dbb, dc) = (x.data_rc(), abar.data_rc(), bbar.data_rc(), c.data_rc());
    // kernel[q][d] = sum_v c_v (abar^q bbar)_v, built by running powers
    let mut kernel = vec![E::ZERO; l * d];
    let mut pw: Vec<E> = dbb.as_ref().clone();
    for q in 0..l {
        for di in 0..d {
            let mut acc = E::ZERO;
            for vi in 0..v {
                acc = dc[vi].mul_add(pw[di * v + vi], acc);
            }
            kernel[q * d + di] = acc;
        }
        if q + 1 < l {
            for i in 0..d * v {
                pw[i] *= dab[i];
            }
        }
    }
    let mut y = vec![E::ZERO; l * d];
    for t in 0..l {
        for s in 0..=t {
            let k = &kernel[s * d..(s + 1) * d];
            let xr = &dx[(t - s) * d..(t - s + 1) * d];
            for di in 0..d {
                y[t * d + di] = k[di].mul_add(xr[di], y[t * d + di]);
            }
        }
    }
    Ok(Tensor::result(vec![l, d], y, false))
}

/// The causal kernel of the LTI form, exposed for the impulse tests:
/// returns [Q, D] with kernel[q][d] = sum_v c_v abar_{d,v}^q bbar_{d,v}.
pub fn ssm_kernel<E: Elem>(abar: &Tensor<E>, bbar: &Tensor<E>, c: &Tensor<E>, q: usize) -> Result<Vec<E>> {
    let (d, v) = match abar.shape() {
        [d, v] => (*d, *v),
        other => {
            return Err(TensorError::NotTimeInvariant {
                op: "ssm_kernel",
                shape: other.to_vec(),
            })
        }
    };
    let (dab, dbb, dc) = (abar.data_rc(), bbar.data_rc(), c.data_rc());
    let mut kernel = vec![E::ZERO; q * d];
    let mut pw: Vec<E> = dbb.as_ref().clone();
    for qi in 0..q {
        for di in 0..d {
            let mut acc = E::ZERO;
            for vi in 0..v {
                acc = dc[vi].mul_add(pw[di * v + vi], acc);
            }
            kernel[qi * d + di] = acc;
        }
        for i in 0..d * v {
            pw[i] *= dab[i];
        }
    }
    Ok(kernel)
}

/// Fused selective path: ZOH-discretize and scan in one op.
///
/// Shapes: u, delta [B, L, D]; bm, cm [B, L, V]; a [D, V] (fixed buffer).
/// Equivalent to `zoh_discretize` + `ssm_scan` per batch item, but never
/// materializes Abar/Bbar and recomputes the state sequence during backward
/// instead of keeping it on the tape.
pub fn selective_scan<E: Elem>(
    g: &Graph<E>,
    u: &Tensor<E>,
    delta: &Tensor<E>,
    bm: &Tensor<E>,
    cm: &Tensor<E>,
    a: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, l, d) = match u.shape() {
        [n, l, d] => (*n, *l, *d),
        other => {
            return Err(TensorError::param(
                "selective_scan",
                format!("u must be [B, L, D], got {other:?}"),
            ))
        }
    };
    if delta.shape() != [n, l, d] {
        return Err(TensorError::param(
            "selective_scan",
            format!("delta shape {:?} != u shape {:?}", delta.shape(), u.shape()),
        ));
    }
    let v = match a.shape() {
        [dd, v] if *dd == d => *v,
        other => {
            return Err(TensorError::param(
                "selective_scan",
                format!("A must be [{d}, V], got {other:?}"),
            ))
        }
    };
    if a.requires_grad() {
        return Err(TensorError::param(
            "selective_scan",
            "gradients w.r.t. A are not supported; A is a fixed buffer",
        ));
    }
    for (name, t) in [("B", bm), ("C", cm)] {
        if t.shape() != [n, l, v] {
            return Err(TensorError::param(
                "selective_scan",
                format!("{name} must be [{n}, {l}, {v}], got {:?}", t.shape()),
            ));
        }
    }
    let (du, ddt, dbm, dcm, da) =
        (u.data_rc(), delta.data_rc(), bm.data_rc(), cm.data_rc(), a.data_rc());
    let ladder = is_ladder(&da, d, v);
    let mut y = vec![E::ZERO; n * l * d];
    let mut h = vec![E::ZERO; d * v];
    let mut ab_row = vec![E::ZERO; v];
    for bi in 0..n {
        h.iter_mut().for_each(|x| *x = E::ZERO);
        for t in 0..l {
            let base = (bi * l + t) * d;
            let brow = &dbm[(bi * l + t) * v..(bi * l + t + 1) * v];
            let crow = &dcm[(bi * l + t) * v..(bi * l + t + 1) * v];
            for di in 0..d {
                let dt = ddt[base + di];
                let uv = du[base + di];
                let arow = &da[di * v..(di + 1) * v];
                fill_abar(&mut ab_row, arow, dt, ladder);
                let hrow = &mut h[di * v..(di + 1) * v];
                let mut acc = E::ZERO;
                for vi in 0..v {
                    let ab = ab_row[vi];
                    let x = dt * arow[vi];
                    let bb = if x.abs().to_f64() < ZOH_SERIES_THRESHOLD {
                        dt * brow[vi] * (E::ONE + x * E::from_f64(0.5))
                    } else {
                        (ab - E::ONE) / arow[vi] * brow[vi]
                    };
                    let hv = ab.mul_add(hrow[vi], bb * uv);
                    hrow[vi] = hv;
                    acc = crow[vi].mul_add(hv, acc);
                }
                y[base + di] = acc;
            }
        }
    }
    let tracks = g.tracks(&[u, delta, bm, cm]);
    let yt = Tensor::result(vec![n, l, d], y, tracks);
    if tracks {
        let (u2, dt2, bm2, cm2, y2) =
            (u.clone(), delta.clone(), bm.clone(), cm.clone(), yt.clone());
        g.record(move || {
            y2.with_grad(|dy| {
                let (du, ddt, dbm, dcm) =
                    (u2.data_rc(), dt2.data_rc(), bm2.data_rc(), cm2.data_rc());
                selective_scan_backward(
                    dy, &du, &ddt, &dbm, &dcm, &da, n, l, d, v, ladder, &u2, &dt2, &bm2, &cm2,
                );
            });
        });
    }
    Ok(yt)
}

/// True when `a` is exactly the negative integer ladder -(v+1) repeated per
/// channel; enables the single-exp power fast path.
fn is_ladder<E: Elem>(a: &[E], d: usize, v: usize) -> bool {
    for di in 0..d {
        for vi in 0..v {
            if a[di * v + vi] != E::from_f64(-((vi + 1) as f64)) {
                return false;
            }
        }
    }
    true
}

/// abar[v] = exp(dt * a[v]). On the ladder pattern this is q^(v+1) with
/// q = exp(-dt): one exp and V multiplies instead of V exps.
#[inline(always)]
fn fill_abar<E: Elem>(out: &mut [E], arow: &[E], dt: E, ladder: bool) {
    if ladder {
        let q = (-dt).exp();
        let mut p = E::ONE;
        for o in out.iter_mut() {
            p *= q;
            *o = p;
        }
    } else {
        for (o, &av) in out.iter_mut().zip(arow) {
            *o = (dt * av).exp();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn selective_scan_backward<E: Elem>(
    dy: &[E],
    du: &[E],
    ddt: &[E],
    dbm: &[E],
    dcm: &[E],
    da: &[E],
    n: usize,
    l: usize,
    d: usize,
    v: usize,
    ladder: bool,
    u2: &Tensor<E>,
    dt2: &Tensor<E>,
    bm2: &Tensor<E>,
    cm2: &Tensor<E>,
) {
    let mut gu = vec![E::ZERO; n * l * d];
    let mut gdt = vec![E::ZERO; n * l * d];
    let mut gbm = vec![E::ZERO; n * l * v];
    let mut gcm = vec![E::ZERO; n * l * v];
    // recomputed forward states for one batch item at a time
    let mut hs = vec![E::ZERO; l * d * v];
    let mut dh = vec![E::ZERO; d * v];
    let mut ab_row = vec![E::ZERO; v];
    for bi in 0..n {
        {
            let mut h = vec![E::ZERO; d * v];
            for t in 0..l {
                let base = (bi * l + t) * d;
                let brow = &dbm[(bi * l + t) * v..(bi * l + t + 1) * v];
                for di in 0..d {
                    let dt = ddt[base + di];
                    let uv = du[base + di];
                    let arow = &da[di * v..(di + 1) * v];
                    fill_abar(&mut ab_row, arow, dt, ladder);
                    let hrow = &mut h[di * v..(di + 1) * v];
                    for vi in 0..v {
                        let ab = ab_row[vi];
                        let x = dt * arow[vi];
                        let bb = if x.abs().to_f64() < ZOH_SERIES_THRESHOLD {
                            dt * brow[vi] * (E::ONE + x * E::from_f64(0.5))
                        } else {
                            (ab - E::ONE) / arow[vi] * brow[vi]
                        };
                        hrow[vi] = ab.mul_add(hrow[vi], bb * uv);
                    }
                }
                hs[t * d * v..(t + 1) * d * v].copy_from_slice(&h);
            }
        }
        dh.iter_mut().for_each(|x| *x = E::ZERO);
        for t in (0..l).rev() {
            let base = (bi * l + t) * d;
            let vbase = (bi * l + t) * v;
            let brow = &dbm[vbase..vbase + v];
            let crow = &dcm[vbase..vbase + v];
            for di in 0..d {
                let dt = ddt[base + di];
                let uv = du[base + di];
                let dyv = dy[base + di];
                let arow = &da[di * v..(di + 1) * v];
                fill_abar(&mut ab_row, arow, dt, ladder);
                let mut gu_acc = E::ZERO;
                let mut gdt_acc = E::ZERO;
                for vi in 0..v {
                    let i = di * v + vi;
                    let ab = ab_row[vi];
                    let av = arow[vi];
                    let x = dt * av;
                    let (bb, bcoef) = if x.abs().to_f64() < ZOH_SERIES_THRESHOLD {
                        let co = dt * (E::ONE + x * E::from_f64(0.5));
                        (co * brow[vi], co)
                    } else {
                        let co = (ab - E::ONE) / av;
                        (co * brow[vi], co)
                    };
                    let ht = hs[t * d * v + i];
                    let hprev = if t > 0 { hs[(t - 1) * d * v + i] } else { E::ZERO };
                    gcm[vbase + vi] = ht.mul_add(dyv, gcm[vbase + vi]);
                    let dhv = dh[i] + crow[vi] * dyv;
                    // d(abar)/d(dt) = a*abar ; d(bbar)/d(dt) = b*abar
                    gdt_acc += dhv * ab * hprev.mul_add(av, brow[vi] * uv);
                    gbm[vbase + vi] = (dhv * uv).mul_add(bcoef, gbm[vbase + vi]);
                    gu_acc = bb.mul_add(dhv, gu_acc);
                    dh[i] = ab * dhv;
                }
                gu[base + di] = gu_acc;
                gdt[base + di] = gdt_acc;
            }
        }
    }
    u2.accum_grad(|g| g.iter_mut().zip(&gu).for_each(|(a, &b)| *a += b));
    dt2.accum_grad(|g| g.iter_mut().zip(&gdt).for_each(|(a, &b)| *a += b));
    bm2.accum_grad(|g| g.iter_mut().zip(&gbm).for_each(|(a, &b)| *a += b));
    cm2.accum_grad(|g| g.iter_mut().zip(&gcm).for_each(|(a, &b)| *a += b));
}

/// The full selective SSM used inside the Mamba module: project, softplus,
/// discretize and scan behind one call.
pub fn selective_ssm<E: Elem>(g: &Graph<E>, x: &Tensor<E>, p: &SsmParams<E>) -> Result<Tensor<E>> {
    let dim = match x.shape() {
        [_, _, dim] => *dim,
        other => {
            return Err(TensorError::param(
                "selective_ssm",
                format!("x must be [B, L, D], got {other:?}"),
            ))
        }
    };
    if dim != p.dim {
        return Err(TensorError::ShapeMismatch {
            op: "selective_ssm",
            axis: 2,
            expected: p.dim,
            got: dim,
        });
    }
    let b = g.matmul(x, &p.w_b)?;
    let c = g.matmul(x, &p.w_c)?;
    let pre = g.bias_last(&g.matmul(x, &p.w_dt)?, &p.bias_dt)?;
    let dt = g.softplus(&pre)?;
    selective_scan(g, x, &dt, &b, &c, &p.a)
}

/// Softplus applied entrywise without a graph (test oracle support).
pub fn softplus_vec<E: Elem>(x: &[E]) -> Vec<E> {
    x.iter().map(|&v| softplus_scalar(v)).collect()
}

/// Sigmoid applied entrywise without a graph (test oracle support).
pub fn sigmoid_vec<E: Elem>(x: &[E]) -> Vec<E> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}
