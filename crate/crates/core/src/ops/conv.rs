//! 2D convolution with stride, zero padding and groups.
//!
//! groups == 1 covers plain convolutions, groups == Cin covers depthwise;
//! a 1x1/stride-1 fast path and a depthwise fast path avoid im2col where it
//! buys nothing. Backward recomputes the patch matrix rather than storing it.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::ops::matmul::transpose;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

fn conv_dims<E: Elem>(
    x: &Tensor<E>,
    wt: &Tensor<E>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvDims> {
    let (b, cin, h, w) = match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(TensorError::param(
                "conv2d",
                format!("input must be rank 4 [B,C,H,W], got {other:?}"),
            ))
        }
    };
    let (cout, cin_g, kh, kw) = match wt.shape() {
        [o, i, kh, kw] => (*o, *i, *kh, *kw),
        other => {
            return Err(TensorError::param(
                "conv2d",
                format!("kernel must be rank 4 [Cout,Cin/g,kh,kw], got {other:?}"),
            ))
        }
    };
    if stride == 0 {
        return Err(TensorError::param("conv2d", "stride must be positive"));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(TensorError::param(
            "conv2d",
            format!("groups {groups} must divide Cin {cin} and Cout {cout}"),
        ));
    }
    if cin_g != cin / groups {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            axis: 1,
            expected: cin / groups,
            got: cin_g,
        });
    }
    if kh > h + 2 * pad {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            axis: 2,
            expected: kh,
            got: h + 2 * pad,
        });
    }
    if kw > w + 2 * pad {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            axis: 3,
            expected: kw,
            got: w + 2 * pad,
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
        groups,
    })
}

/// Patch matrix for one image and one group: [Cin_g*kh*kw, OH*OW].
fn im2col<E: Elem>(x: &[E], d: &ConvDims, g: usize, cols: &mut [E]) {
    let cin_g = d.cin / d.groups;
    let n = d.oh * d.ow;
    debug_assert_eq!(cols.len(), cin_g * d.kh * d.kw * n);
    for ci in 0..cin_g {
        let ch = &x[(g * cin_g + ci) * d.h * d.w..(g * cin_g + ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((ci * d.kh + ki) * d.kw + kj) * n;
                for oi in 0..d.oh {
                    let iy = (oi * d.stride + ki) as isize - d.pad as isize;
                    let base = row + oi * d.ow;
                    if iy < 0 || iy >= d.h as isize {
                        for oj in 0..d.ow {
                            cols[base + oj] = E::ZERO;
                        }
                        continue;
                    }
                    let iy = iy as usize;
                    for oj in 0..d.ow {
                        let ix = (oj * d.stride + kj) as isize - d.pad as isize;
                        cols[base + oj] = if ix < 0 || ix >= d.w as isize {
                            E::ZERO
                        } else {
                            ch[iy * d.w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter the adjoint of the patch matrix back to the input image.
fn col2im_add<E: Elem>(cols: &[E], d: &ConvDims, g: usize, gx: &mut [E]) {
    let cin_g = d.cin / d.groups;
    let n = d.oh * d.ow;
    for ci in 0..cin_g {
        let ch_off = (g * cin_g + ci) * d.h * d.w;
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((ci * d.kh + ki) * d.kw + kj) * n;
                for oi in 0..d.oh {
                    let iy = (oi * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for oj in 0..d.ow {
                        let ix = (oj * d.stride + kj) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        gx[ch_off + iy * d.w + ix as usize] += cols[row + oi * d.ow + oj];
                    }
                }
            }
        }
    }
}

fn forward_pointwise<E: Elem>(x: &[E], wt: &[E], d: &ConvDims) -> Vec<E> {
    // 1x1 stride-1 groups-1: y[b] = W [Cout,Cin] . x[b] [Cin, HW]
    let hw = d.h * d.w;
    let mut out = vec![E::ZERO; d.b * d.cout * hw];
    for bi in 0..d.b {
        E::gemm(
            d.cout,
            d.cin,
            hw,
            E::ONE,
            wt,
            &x[bi * d.cin * hw..(bi + 1) * d.cin * hw],
            E::ZERO,
            &mut out[bi * d.cout * hw..(bi + 1) * d.cout * hw],
        );
    }
    out
}

fn forward_depthwise<E: Elem>(x: &[E], wt: &[E], d: &ConvDims) -> Vec<E> {
    let mut out = vec![E::ZERO; d.b * d.cout * d.oh * d.ow];
    for bi in 0..d.b {
        for c in 0..d.cin {
            let ch = &x[(bi * d.cin + c) * d.h * d.w..(bi * d.cin + c + 1) * d.h * d.w];
            let ker = &wt[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
            let o = (bi * d.cout + c) * d.oh * d.ow;
            for oi in 0..d.oh {
                for oj in 0..d.ow {
                    let mut acc = E::ZERO;
                    for ki in 0..d.kh {
                        let iy = (oi * d.stride + ki) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kj in 0..d.kw {
                            let ix = (oj * d.stride + kj) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            // plain multiply-add keeps depthwise output
                            // bit-identical to a nested-loop oracle
                            acc += ker[ki * d.kw + kj] * ch[iy as usize * d.w + ix as usize];
                        }
                    }
                    out[o + oi * d.ow + oj] = acc;
                }
            }
        }
    }
    out
}

fn forward_general<E: Elem>(x: &[E], wt: &[E], d: &ConvDims) -> Vec<E> {
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let k2 = cin_g * d.kh * d.kw;
    let n = d.oh * d.ow;
    let mut out = vec![E::ZERO; d.b * d.cout * n];
    let mut cols = vec![E::ZERO; k2 * n];
    for bi in 0..d.b {
        let img = &x[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
        for g in 0..d.groups {
            im2col(img, d, g, &mut cols);
            let wg = &wt[g * cout_g * k2..(g + 1) * cout_g * k2];
            let og = (bi * d.cout + g * cout_g) * n;
            E::gemm(cout_g, k2, n, E::ONE, wg, &cols, E::ZERO, &mut out[og..og + cout_g * n]);
        }
    }
    out
}

impl<E: Elem> Graph<E> {
    /// `x [B,Cin,H,W] * w [Cout,Cin/g,kh,kw] -> [B,Cout,OH,OW]` with
    /// `OH = (H + 2*pad - kh)/stride + 1`. Gradients flow to `x` and `w`.
    pub fn conv2d(
        &self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor<E>> {
        let d = conv_dims(x, w, stride, pad, groups)?;
        let (dx, dw) = (x.data_rc(), w.data_rc());
        let pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0 && d.groups == 1;
        let depthwise = d.groups == d.cin && d.cout == d.cin;
        let out = if pointwise {
            forward_pointwise(&dx, &dw, &d)
        } else if depthwise {
            forward_depthwise(&dx, &dw, &d)
        } else {
            forward_general(&dx, &dw, &d)
        };
        let y = Tensor::result(vec![d.b, d.cout, d.oh, d.ow], out, self.tracks(&[x, w]));
        if self.tracks(&[x, w]) {
            let (x2, w2, y2) = (x.clone(), w.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    if pointwise {
                        backward_pointwise(&x2, &w2, dy, &d);
                    } else if depthwise {
                        backward_depthwise(&x2, &w2, dy, &d);
                    } else {
                        backward_general(&x2, &w2, dy, &d);
                    }
                });
            });
        }
        Ok(y)
    }
}

fn backward_pointwise<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, dy: &[E], d: &ConvDims) {
    let hw = d.h * d.w;
    let (dxv, dwv) = (x.data_rc(), w.data_rc());
    if w.needs_grad() {
        w.accum_grad(|gw| {
            // dW += sum_b dY[b] . X[b]^T
            for bi in 0..d.b {
                let xt = transpose(&dxv[bi * d.cin * hw..(bi + 1) * d.cin * hw], d.cin, hw);
                E::gemm(
                    d.cout,
                    hw,
                    d.cin,
                    E::ONE,
                    &dy[bi * d.cout * hw..(bi + 1) * d.cout * hw],
                    &xt,
                    E::ONE,
                    gw,
                );
            }
        });
    }
    if x.needs_grad() {
        let wt = transpose(&dwv, d.cout, d.cin);
        x.accum_grad(|gx| {
            for bi in 0..d.b {
                E::gemm(
                    d.cin,
                    d.cout,
                    hw,
                    E::ONE,
                    &wt,
                    &dy[bi * d.cout * hw..(bi + 1) * d.cout * hw],
                    E::ONE,
                    &mut gx[bi * d.cin * hw..(bi + 1) * d.cin * hw],
                );
            }
        });
    }
}

fn backward_depthwise<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, dy: &[E], d: &ConvDims) {
    let (dxv, dwv) = (x.data_rc(), w.data_rc());
    if w.needs_grad() {
        w.accum_grad(|gw| {
            for bi in 0..d.b {
                for c in 0..d.cin {
                    let ch = &dxv[(bi * d.cin + c) * d.h * d.w..(bi * d.cin + c + 1) * d.h * d.w];
                    let o = (bi * d.cout + c) * d.oh * d.ow;
                    for ki in 0..d.kh {
                        for kj in 0..d.kw {
                            let mut acc = E::ZERO;
                            for oi in 0..d.oh {
                                let iy = (oi * d.stride + ki) as isize - d.pad as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for oj in 0..d.ow {
                                    let ix = (oj * d.stride + kj) as isize - d.pad as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc = dy[o + oi * d.ow + oj]
                                        .mul_add(ch[iy as usize * d.w + ix as usize], acc);
                                }
                            }
                            gw[(c * d.kh + ki) * d.kw + kj] += acc;
                        }
                    }
                }
            }
        });
    }
    if x.needs_grad() {
        x.accum_grad(|gx| {
            for bi in 0..d.b {
                for c in 0..d.cin {
                    let ker = &dwv[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
                    let o = (bi * d.cout + c) * d.oh * d.ow;
                    let xoff = (bi * d.cin + c) * d.h * d.w;
                    for oi in 0..d.oh {
                        for oj in 0..d.ow {
                            let dyv = dy[o + oi * d.ow + oj];
                            for ki in 0..d.kh {
                                let iy = (oi * d.stride + ki) as isize - d.pad as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for kj in 0..d.kw {
                                    let ix = (oj * d.stride + kj) as isize - d.pad as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    gx[xoff + iy as usize * d.w + ix as usize] +=
                                        dyv * ker[ki * d.kw + kj];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

fn backward_general<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, dy: &[E], d: &ConvDims) {
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let k2 = cin_g * d.kh * d.kw;
    let n = d.oh * d.ow;
    let (dxv, dwv) = (x.data_rc(), w.data_rc());
    let mut cols = vec![E::ZERO; k2 * n];

    if w.needs_grad() {
        w.accum_grad(|gw| {
            for bi in 0..d.b {
                let img = &dxv[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
                for g in 0..d.groups {
                    im2col(img, d, g, &mut cols);
                    let colt = transpose(&cols, k2, n);
                    let og = (bi * d.cout + g * cout_g) * n;
                    E::gemm(
                        cout_g,
                        n,
                        k2,
                        E::ONE,
                        &dy[og..og + cout_g * n],
                        &colt,
                        E::ONE,
                        &mut gw[g * cout_g * k2..(g + 1) * cout_g * k2],
                    );
                }
            }
        });
    }
    if x.needs_grad() {
        x.accum_grad(|gx| {
            let mut dcols = vec![E::ZERO; k2 * n];
            for bi in 0..d.b {
                for g in 0..d.groups {
                    let wt = transpose(&dwv[g * cout_g * k2..(g + 1) * cout_g * k2], cout_g, k2);
                    let og = (bi * d.cout + g * cout_g) * n;
                    E::gemm(
                        k2,
                        cout_g,
                        n,
                        E::ONE,
                        &wt,
                        &dy[og..og + cout_g * n],
                        E::ZERO,
                        &mut dcols,
                    );
                    col2im_add(
                        &dcols,
                        d,
                        g,
                        &mut gx[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w],
                    );
                }
            }
        });
    }
}
