//! Normalization layers: batch norm over [B,C,H,W], layer norm and RMS layer
//! norm over the last axis. All use biased variance.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; the caller receives them to fold
    /// into the running estimates.
    Train,
    /// Normalize with the provided running statistics.
    Eval,
}

/// Per-channel batch statistics observed during a train-mode forward.
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Elem> Graph<E> {
    /// Per-channel standardization then affine. In train mode the batch
    /// statistics are returned; running buffers are never mutated here.
    pub fn batchnorm2d(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
        mode: BnMode,
    ) -> Result<(Tensor<E>, Option<BatchStats<E>>)> {
        if eps <= 0.0 {
            return Err(TensorError::param("batchnorm2d", format!("eps must be > 0, got {eps}")));
        }
        let (b, c, h, w) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            other => {
                return Err(TensorError::param(
                    "batchnorm2d",
                    format!("expected rank 4, got {other:?}"),
                ))
            }
        };
        for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
            if t.numel() != c {
                return Err(TensorError::param(
                    "batchnorm2d",
                    format!("{name} must have {c} elements, got {}", t.numel()),
                ));
            }
        }
        let hw = h * w;
        let n = b * hw;
        let dx = x.data_rc();

        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![E::ZERO; c];
                let mut var = vec![E::ZERO; c];
                let inv_n = E::from_f64(1.0 / n as f64);
                for ci in 0..c {
                    let mut s = E::ZERO;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            s += dx[base + i];
                        }
                    }
                    let m = s * inv_n;
                    let mut v = E::ZERO;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            let d = dx[base + i] - m;
                            v = d.mul_add(d, v);
                        }
                    }
                    mean[ci] = m;
                    var[ci] = v * inv_n;
                }
                (mean, var)
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };

        let (dg, db) = (gamma.data_rc(), beta.data_rc());
        let epe = E::from_f64(eps);
        let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + epe).sqrt()).collect();
        let mut out = vec![E::ZERO; x.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (m, s, g, be) = (mean[ci], inv_std[ci], dg[ci], db[ci]);
                for i in 0..hw {
                    out[base + i] = (dx[base + i] - m) * s * g + be;
                }
            }
        }

        let y = Tensor::result(x.shape().to_vec(), out, self.tracks(&[x, gamma, beta]));
        if self.tracks(&[x, gamma, beta]) {
            let (x2, g2, b2, y2) = (x.clone(), gamma.clone(), beta.clone(), y.clone());
            let mean2 = mean.clone();
            let inv_std2 = inv_std.clone();
            let train = mode == BnMode::Train;
            self.record(move || {
                y2.with_grad(|dy| {
                    let dx = x2.data_rc();
                    let dg = g2.data_rc();
                    // per-channel reductions
                    let mut sum_dy = vec![E::ZERO; c];
                    let mut sum_dy_xhat = vec![E::ZERO; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let (m, s) = (mean2[ci], inv_std2[ci]);
                            let mut a0 = E::ZERO;
                            let mut a1 = E::ZERO;
                            for i in 0..hw {
                                let d = dy[base + i];
                                a0 += d;
                                a1 = d.mul_add((dx[base + i] - m) * s, a1);
                            }
                            sum_dy[ci] += a0;
                            sum_dy_xhat[ci] += a1;
                        }
                    }
                    b2.accum_grad(|gb| {
                        for ci in 0..c {
                            gb[ci] += sum_dy[ci];
                        }
                    });
                    g2.accum_grad(|gg| {
                        for ci in 0..c {
                            gg[ci] += sum_dy_xhat[ci];
                        }
                    });
                    if x2.needs_grad() {
                        let inv_n = E::from_f64(1.0 / n as f64);
                        x2.accum_grad(|gx| {
                            for bi in 0..b {
                                for ci in 0..c {
                                    let base = (bi * c + ci) * hw;
                                    let (m, s, g) = (mean2[ci], inv_std2[ci], dg[ci]);
                                    if train {
                                        let c0 = sum_dy[ci] * inv_n;
                                        let c1 = sum_dy_xhat[ci] * inv_n;
                                        for i in 0..hw {
                                            let xhat = (dx[base + i] - m) * s;
                                            gx[base + i] += g * s * (dy[base + i] - c0 - xhat * c1);
                                        }
                                    } else {
                                        for i in 0..hw {
                                            gx[base + i] += g * s * dy[base + i];
                                        }
                                    }
                                }
                            }
                        });
                    }
                });
            });
        }
        let stats = match mode {
            BnMode::Train => Some(BatchStats { mean, var }),
            BnMode::Eval => None,
        };
        Ok((y, stats))
    }

    /// Layer norm over the last axis: standardize each row, then affine.
    pub fn layernorm_last(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        if eps <= 0.0 {
            return Err(TensorError::param("layernorm_last", format!("eps must be > 0, got {eps}")));
        }
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::param("layernorm_last", "rank 0 input"))?;
        if gamma.numel() != d || beta.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm_last",
                axis: x.rank() - 1,
                expected: d,
                got: gamma.numel(),
            });
        }
        let rows = x.numel() / d;
        let dx = x.data_rc();
        let (dg, db) = (gamma.data_rc(), beta.data_rc());
        let inv_d = E::from_f64(1.0 / d as f64);
        let epe = E::from_f64(eps);
        let mut out = vec![E::ZERO; x.numel()];
        let mut means = vec![E::ZERO; rows];
        let mut inv_stds = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let mut m = E::ZERO;
            for &v in row {
                m += v;
            }
            m *= inv_d;
            let mut var = E::ZERO;
            for &v in row {
                let dv = v - m;
                var = dv.mul_add(dv, var);
            }
            var *= inv_d;
            let s = E::ONE / (var + epe).sqrt();
            means[r] = m;
            inv_stds[r] = s;
            for j in 0..d {
                out[r * d + j] = (row[j] - m) * s * dg[j] + db[j];
            }
        }
        let y = Tensor::result(x.shape().to_vec(), out, self.tracks(&[x, gamma, beta]));
        if self.tracks(&[x, gamma, beta]) {
            let (x2, g2, b2, y2) = (x.clone(), gamma.clone(), beta.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    let dx = x2.data_rc();
                    let dg = g2.data_rc();
                    b2.accum_grad(|gb| {
                        for r in 0..rows {
                            for j in 0..d {
                                gb[j] += dy[r * d + j];
                            }
                        }
                    });
                    g2.accum_grad(|gg| {
                        for r in 0..rows {
                            let (m, s) = (means[r], inv_stds[r]);
                            for j in 0..d {
                                gg[j] += dy[r * d + j] * (dx[r * d + j] - m) * s;
                            }
                        }
                    });
                    if x2.needs_grad() {
                        x2.accum_grad(|gx| {
                            for r in 0..rows {
                                let (m, s) = (means[r], inv_stds[r]);
                                let mut c0 = E::ZERO;
                                let mut c1 = E::ZERO;
                                for j in 0..d {
                                    let xhat = (dx[r * d + j] - m) * s;
                                    let dyg = dy[r * d + j] * dg[j];
                                    c0 += dyg;
                                    c1 = dyg.mul_add(xhat, c1);
                                }
                                c0 *= inv_d;
                                c1 *= inv_d;
                                for j in 0..d {
                                    let xhat = (dx[r * d + j] - m) * s;
                                    let dyg = dy[r * d + j] * dg[j];
                                    gx[r * d + j] += s * (dyg - c0 - xhat * c1);
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(y)
    }

    /// RMS layer norm over the last axis: y_i = x_i / sqrt(mean(x^2) + eps) * gamma_i.
    pub fn rmsnorm_last(&self, x: &Tensor<E>, gamma: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        if eps <= 0.0 {
            return Err(TensorError::param("rmsnorm_last", format!("eps must be > 0, got {eps}")));
        }
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::param("rmsnorm_last", "rank 0 input"))?;
        if gamma.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm_last",
                axis: x.rank() - 1,
                expected: d,
                got: gamma.numel(),
            });
        }
        let rows = x.numel() / d;
        let dx = x.data_rc();
        let dg = gamma.data_rc();
        let inv_d = E::from_f64(1.0 / d as f64);
        let epe = E::from_f64(eps);
        let mut out = vec![E::ZERO; x.numel()];
        let mut inv_rms = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let mut ms = E::ZERO;
            for &v in row {
                ms = v.mul_add(v, ms);
            }
            ms *= inv_d;
            let s = E::ONE / (ms + epe).sqrt();
            inv_rms[r] = s;
            for j in 0..d {
                out[r * d + j] = row[j] * s * dg[j];
            }
        }
        let y = Tensor::result(x.shape().to_vec(), out, self.tracks(&[x, gamma]));
        if self.tracks(&[x, gamma]) {
            let (x2, g2, y2) = (x.clone(), gamma.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    let dx = x2.data_rc();
                    let dg = g2.data_rc();
                    g2.accum_grad(|gg| {
                        for r in 0..rows {
                            let s = inv_rms[r];
                            for j in 0..d {
                                gg[j] += dy[r * d + j] * dx[r * d + j] * s;
                            }
                        }
                    });
                    if x2.needs_grad() {
                        x2.accum_grad(|gx| {
                            for r in 0..rows {
                                let s = inv_rms[r];
                                let s3 = s * s * s;
                                let mut dot = E::ZERO;
                                for j in 0..d {
                                    dot = (dy[r * d + j] * dg[j]).mul_add(dx[r * d + j], dot);
                                }
                                let k = s3 * inv_d * dot;
                                for j in 0..d {
                                    gx[r * d + j] += dy[r * d + j] * dg[j] * s - dx[r * d + j] * k;
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(y)
    }
}
