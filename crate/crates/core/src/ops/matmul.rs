//! Matrix products and bias broadcasts. The leading axes of the left operand
//! are folded into rows, so [B, L, K] x [K, N] is a single GEMM.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::{Graph, Tensor};

impl<E: Elem> Graph<E> {
    /// `x [.., K] x w [K, N] -> [.., N]`.
    pub fn matmul(&self, x: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
        let (k, n) = match w.shape() {
            [k, n] => (*k, *n),
            other => {
                return Err(TensorError::param(
                    "matmul",
                    format!("weight must be rank 2, got {other:?}"),
                ))
            }
        };
        let xk = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::param("matmul", "lhs is rank 0"))?;
        if xk != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                axis: x.rank() - 1,
                expected: k,
                got: xk,
            });
        }
        let m = x.numel() / k;
        let (dx, dw) = (x.data_rc(), w.data_rc());
        let mut out = vec![E::ZERO; m * n];
        E::gemm(m, k, n, E::ONE, &dx, &dw, E::ZERO, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let y = Tensor::result(shape, out, self.tracks(&[x, w]));
        if self.tracks(&[x, w]) {
            let (x2, w2, y2) = (x.clone(), w.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    // dX = dY . W^T ; dW = X^T . dY
                    if x2.needs_grad() {
                        let wt = transpose(&w2.data_rc(), k, n);
                        let mut dx_buf = vec![E::ZERO; m * k];
                        E::gemm(m, n, k, E::ONE, dy, &wt, E::ZERO, &mut dx_buf);
                        x2.accum_grad(|gx| {
                            gx.iter_mut().zip(&dx_buf).for_each(|(g, &d)| *g += d)
                        });
                    }
                    if w2.needs_grad() {
                        let xt = transpose(&x2.data_rc(), m, k);
                        let mut dw_buf = vec![E::ZERO; k * n];
                        E::gemm(k, m, n, E::ONE, &xt, dy, E::ZERO, &mut dw_buf);
                        w2.accum_grad(|gw| {
                            gw.iter_mut().zip(&dw_buf).for_each(|(g, &d)| *g += d)
                        });
                    }
                });
            });
        }
        Ok(y)
    }

    /// Add a [N] bias across the last axis.
    pub fn bias_last(&self, x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::param("bias_last", "rank 0 input"))?;
        if b.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_last",
                axis: x.rank() - 1,
                expected: n,
                got: b.numel(),
            });
        }
        let rows = x.numel() / n;
        let (dx, db) = (x.data_rc(), b.data_rc());
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..rows {
            for j in 0..n {
                out.push(dx[r * n + j] + db[j]);
            }
        }
        let y = Tensor::result(x.shape().to_vec(), out, self.tracks(&[x, b]));
        if self.tracks(&[x, b]) {
            let (x2, b2, y2) = (x.clone(), b.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d));
                    b2.accum_grad(|gb| {
                        for r in 0..rows {
                            for j in 0..n {
                                gb[j] += dy[r * n + j];
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Add a [C] bias across the channel axis of [B, C, H, W].
    pub fn bias_channel(&self, x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (bs, c, h, w) = match x.shape() {
            [bs, c, h, w] => (*bs, *c, *h, *w),
            other => {
                return Err(TensorError::param(
                    "bias_channel",
                    format!("expected rank 4, got {other:?}"),
                ))
            }
        };
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_channel",
                axis: 1,
                expected: c,
                got: b.numel(),
            });
        }
        let hw = h * w;
        let (dx, db) = (x.data_rc(), b.data_rc());
        let mut out = Vec::with_capacity(x.numel());
        for bi in 0..bs {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let bias = db[ci];
                for i in 0..hw {
                    out.push(dx[base + i] + bias);
                }
            }
        }
        let y = Tensor::result(x.shape().to_vec(), out, self.tracks(&[x, b]));
        if self.tracks(&[x, b]) {
            let (x2, b2, y2) = (x.clone(), b.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d));
                    b2.accum_grad(|gb| {
                        for bi in 0..bs {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                let mut s = E::ZERO;
                                for i in 0..hw {
                                    s += dy[base + i];
                                }
                                gb[ci] += s;
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }
}

pub(crate) fn transpose<E: Elem>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
