//! Shape manipulation: reshape (zero-copy), transposes, narrowing,
//! concatenation and token gathering (the scan-order permutations).

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::{Graph, Tensor};

/// Interpret a rank-2 tensor as batch 1 of rank 3, returning (b, s, d).
fn as_3d<E: Elem>(op: &'static str, x: &Tensor<E>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [s, d] => Ok((1, *s, *d)),
        [b, s, d] => Ok((*b, *s, *d)),
        other => Err(TensorError::param(
            op,
            format!("expected rank 2 or 3 tensor, got shape {other:?}"),
        )),
    }
}

impl<E: Elem> Graph<E> {
    /// Row-major relabeling; shares the buffer, so reshape(a->b->a) is identity.
    pub fn reshape(&self, a: &Tensor<E>, shape: impl Into<Vec<usize>>) -> Result<Tensor<E>> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != a.numel() {
            return Err(TensorError::param(
                "reshape",
                format!("cannot view {:?} as {:?}", a.shape(), shape),
            ));
        }
        let y = Tensor::result(shape, a.to_vec(), self.tracks(&[a]));
        if self.tracks(&[a]) {
            let (a, y2) = (a.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    a.accum_grad(|ga| ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d));
                });
            });
        }
        Ok(y)
    }

    /// [A, B, C] -> [A, C, B].
    pub fn transpose_12(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b, c) = match x.shape() {
            [a, b, c] => (*a, *b, *c),
            other => {
                return Err(TensorError::param(
                    "transpose_12",
                    format!("expected rank 3, got {other:?}"),
                ))
            }
        };
        let dx = x.data_rc();
        let mut out = vec![E::ZERO; dx.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out[i * c * b + k * b + j] = dx[i * b * c + j * c + k];
                }
            }
        }
        let y = Tensor::result(vec![a, c, b], out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for i in 0..a {
                            for j in 0..b {
                                for k in 0..c {
                                    gx[i * b * c + j * c + k] += dy[i * c * b + k * b + j];
                                }
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Slice `len` rows starting at `start` along the token axis of [B,S,D]
    /// (or [S,D]).
    pub fn narrow_tokens(&self, x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        let (b, s, d) = as_3d("narrow_tokens", x)?;
        if start + len > s {
            return Err(TensorError::param(
                "narrow_tokens",
                format!("range {start}..{} out of {s} tokens", start + len),
            ));
        }
        let dx = x.data_rc();
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let base = bi * s * d + start * d;
            out.extend_from_slice(&dx[base..base + len * d]);
        }
        let out_shape = if x.rank() == 2 { vec![len, d] } else { vec![b, len, d] };
        let y = Tensor::result(out_shape, out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for bi in 0..b {
                            let src = bi * len * d;
                            let dst = bi * s * d + start * d;
                            for i in 0..len * d {
                                gx[dst + i] += dy[src + i];
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Concatenate along the token axis of [B,S,D] tensors.
    pub fn concat_tokens(&self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(TensorError::param("concat_tokens", "no inputs"));
        }
        let (b, _, d) = as_3d("concat_tokens", parts[0])?;
        let rank = parts[0].rank();
        let mut seg = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (pb, ps, pd) = as_3d("concat_tokens", p)?;
            if pb != b || pd != d || p.rank() != rank {
                return Err(TensorError::param(
                    "concat_tokens",
                    format!("incompatible part shape {:?}", p.shape()),
                ));
            }
            seg.push(ps);
            total += ps;
        }
        let mut out = Vec::with_capacity(b * total * d);
        let datas: Vec<_> = parts.iter().map(|p| p.data_rc()).collect();
        for bi in 0..b {
            for (p, &ps) in datas.iter().zip(&seg) {
                out.extend_from_slice(&p[bi * ps * d..(bi + 1) * ps * d]);
            }
        }
        let out_shape = if rank == 2 { vec![total, d] } else { vec![b, total, d] };
        let tracks = self.is_recording() && parts.iter().any(|p| p.needs_grad());
        let y = Tensor::result(out_shape, out, tracks);
        if tracks {
            let parts: Vec<Tensor<E>> = parts.iter().map(|p| (*p).clone()).collect();
            let y2 = y.clone();
            let seg2 = seg.clone();
            self.record(move || {
                y2.with_grad(|dy| {
                    for bi in 0..b {
                        let mut off = bi * total * d;
                        for (p, &ps) in parts.iter().zip(&seg2) {
                            let src = &dy[off..off + ps * d];
                            p.accum_grad(|gp| {
                                let dst = bi * ps * d;
                                for i in 0..ps * d {
                                    gp[dst + i] += src[i];
                                }
                            });
                            off += ps * d;
                        }
                    }
                });
            });
        }
        Ok(y)
    }

    /// Slice columns [start, start+len) of the last axis.
    pub fn narrow_last(&self, x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        let d = *x.shape().last().ok_or_else(|| TensorError::param("narrow_last", "rank 0"))?;
        if start + len > d {
            return Err(TensorError::param(
                "narrow_last",
                format!("range {start}..{} out of {d} columns", start + len),
            ));
        }
        let rows = x.numel() / d;
        let dx = x.data_rc();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&dx[r * d + start..r * d + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let y = Tensor::result(shape, out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for r in 0..rows {
                            for i in 0..len {
                                gx[r * d + start + i] += dy[r * len + i];
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(TensorError::param("concat_last", "no inputs"));
        }
        let lead = &parts[0].shape()[..parts[0].rank() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            if &p.shape()[..p.rank() - 1] != lead {
                return Err(TensorError::param(
                    "concat_last",
                    format!("incompatible part shape {:?}", p.shape()),
                ));
            }
            let w = *p.shape().last().unwrap();
            widths.push(w);
            total += w;
        }
        let datas: Vec<_> = parts.iter().map(|p| p.data_rc()).collect();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&p[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let tracks = self.is_recording() && parts.iter().any(|p| p.needs_grad());
        let y = Tensor::result(shape, out, tracks);
        if tracks {
            let parts: Vec<Tensor<E>> = parts.iter().map(|p| (*p).clone()).collect();
            let y2 = y.clone();
            let widths2 = widths.clone();
            self.record(move || {
                y2.with_grad(|dy| {
                    for r in 0..rows {
                        let mut off = r * total;
                        for (p, &w) in parts.iter().zip(&widths2) {
                            let src = &dy[off..off + w];
                            p.accum_grad(|gp| {
                                for i in 0..w {
                                    gp[r * w + i] += src[i];
                                }
                            });
                            off += w;
                        }
                    }
                });
            });
        }
        Ok(y)
    }

    /// Reorder tokens: `out[.., i, :] = x[.., idx[i], :]`. `idx` must be a
    /// permutation for the gradient scatter to be collision-free; callers in
    /// this crate only pass permutations.
    pub fn gather_tokens(&self, x: &Tensor<E>, idx: &[usize]) -> Result<Tensor<E>> {
        let (b, s, d) = as_3d("gather_tokens", x)?;
        if idx.len() != s {
            return Err(TensorError::ShapeMismatch {
                op: "gather_tokens",
                axis: x.rank() - 2,
                expected: s,
                got: idx.len(),
            });
        }
        for &i in idx {
            if i >= s {
                return Err(TensorError::param("gather_tokens", format!("index {i} out of {s}")));
            }
        }
        let dx = x.data_rc();
        let mut out = Vec::with_capacity(b * s * d);
        for bi in 0..b {
            let base = bi * s * d;
            for &i in idx {
                out.extend_from_slice(&dx[base + i * d..base + (i + 1) * d]);
            }
        }
        let y = Tensor::result(x.shape().to_vec(), out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            let idx2 = idx.to_vec();
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for bi in 0..b {
                            let base = bi * s * d;
                            for (pos, &i) in idx2.iter().enumerate() {
                                let src = base + pos * d;
                                let dst = base + i * d;
                                for j in 0..d {
                                    gx[dst + j] += dy[src + j];
                                }
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Expand a [D] vector to [B, 1, D] (class-token broadcast).
    pub fn broadcast_token(&self, v: &Tensor<E>, batch: usize) -> Result<Tensor<E>> {
        let d = match v.shape() {
            [d] => *d,
            other => {
                return Err(TensorError::param(
                    "broadcast_token",
                    format!("expected rank 1, got {other:?}"),
                ))
            }
        };
        let dv = v.data_rc();
        let mut out = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            out.extend_from_slice(&dv);
        }
        let y = Tensor::result(vec![batch, 1, d], out, self.tracks(&[v]));
        if self.tracks(&[v]) {
            let (v2, y2) = (v.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    v2.accum_grad(|gv| {
                        for bi in 0..batch {
                            for j in 0..d {
                                gv[j] += dy[bi * d + j];
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }
}
