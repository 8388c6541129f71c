//! Elementwise activations and row softmax.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::{Graph, Tensor};

#[inline(always)]
pub(crate) fn sigmoid_scalar<E: Elem>(x: E) -> E {
    // 1 / (1 + e^{-x}), saturation-safe on both tails.
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

#[inline(always)]
pub(crate) fn softplus_scalar<E: Elem>(x: E) -> E {
    // ln(1 + e^x) = max(x, 0) + ln1p(e^{-|x|})
    x.maximum(E::ZERO) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline(always)]
fn gelu_scalar<E: Elem>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let u = c * (x + a * x * x * x);
    E::from_f64(0.5) * x * (E::ONE + u.tanh())
}

#[inline(always)]
fn gelu_grad_scalar<E: Elem>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + E::from_f64(3.0) * a * x * x)
}

impl<E: Elem> Graph<E> {
    fn unary(
        &self,
        x: &Tensor<E>,
        fwd: impl Fn(E) -> E,
        // derivative as a function of the input value
        bwd: impl Fn(E) -> E + 'static,
    ) -> Tensor<E> {
        let dx = x.data_rc();
        let out: Vec<E> = dx.iter().map(|&v| fwd(v)).collect();
        let y = Tensor::result(x.shape().to_vec(), out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    let dx = x2.data_rc();
                    x2.accum_grad(|gx| {
                        for i in 0..gx.len() {
                            gx[i] += dy[i] * bwd(dx[i]);
                        }
                    });
                });
            });
        }
        y
    }

    pub fn relu(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.unary(
            x,
            |v| v.maximum(E::ZERO),
            |v| if v > E::ZERO { E::ONE } else { E::ZERO },
        ))
    }

    /// SiLU(x) = x * sigmoid(x).
    pub fn silu(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.unary(
            x,
            |v| v * sigmoid_scalar(v),
            |v| {
                let s = sigmoid_scalar(v);
                s * (E::ONE + v * (E::ONE - s))
            },
        ))
    }

    /// GeLU with the tanh approximation.
    pub fn gelu(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.unary(x, gelu_scalar, gelu_grad_scalar))
    }

    /// SoftPlus(x) = ln(1 + e^x); strictly positive output.
    pub fn softplus(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.unary(x, softplus_scalar, sigmoid_scalar))
    }

    pub fn sigmoid(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.unary(
            x,
            sigmoid_scalar,
            |v| {
                let s = sigmoid_scalar(v);
                s * (E::ONE - s)
            },
        ))
    }

    /// Softmax over the last axis; each row sums to one.
    pub fn softmax_last(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::param("softmax_last", "rank 0 input"))?;
        let rows = x.numel() / n;
        let dx = x.data_rc();
        let mut out = vec![E::ZERO; x.numel()];
        for r in 0..rows {
            let row = &dx[r * n..(r + 1) * n];
            let mut m = row[0];
            for &v in row.iter() {
                m = m.maximum(v);
            }
            let mut s = E::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * n + j] = e;
                s += e;
            }
            for j in 0..n {
                out[r * n + j] = out[r * n + j] / s;
            }
        }
        let y = Tensor::result(x.shape().to_vec(), out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                let dyt = y2.data_rc();
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for r in 0..rows {
                            let o = r * n;
                            let mut dot = E::ZERO;
                            for j in 0..n {
                                dot += dy[o + j] * dyt[o + j];
                            }
                            for j in 0..n {
                                gx[o + j] += dyt[o + j] * (dy[o + j] - dot);
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }
}
