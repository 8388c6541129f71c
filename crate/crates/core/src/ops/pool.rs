//! Pooling and resampling: max pooling (argmax-routed gradients, first-index
//! tie break), adaptive average pooling, nearest-neighbour upsampling and
//! bilinear resizing with half-pixel-centre alignment.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::{Graph, Tensor};

fn dims4<E: Elem>(op: &'static str, x: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        other => Err(TensorError::param(op, format!("expected rank 4, got {other:?}"))),
    }
}

#[inline]
fn adaptive_window(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end.max(start + 1))
}

impl<E: Elem> Graph<E> {
    /// Max pooling with a k x k window. Gradient goes to the argmax position;
    /// ties break toward the lowest flat index.
    pub fn maxpool2d(&self, x: &Tensor<E>, k: usize, stride: usize, pad: usize) -> Result<Tensor<E>> {
        let (b, c, h, w) = dims4("maxpool2d", x)?;
        if k == 0 || stride == 0 {
            return Err(TensorError::param("maxpool2d", "kernel and stride must be positive"));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(TensorError::param(
                "maxpool2d",
                format!("window {k} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let dx = x.data_rc();
        let mut out = vec![E::ZERO; b * c * oh * ow];
        let mut arg = vec![usize::MAX; b * c * oh * ow];
        for bc in 0..b * c {
            let img = &dx[bc * h * w..(bc + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best: Option<(E, usize)> = None;
                    for ki in 0..k {
                        let iy = (oi * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (oj * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            let v = img[idx];
                            match best {
                                None => best = Some((v, idx)),
                                Some((bv, _)) if v > bv => best = Some((v, idx)),
                                _ => {}
                            }
                        }
                    }
                    let o = bc * oh * ow + oi * ow + oj;
                    if let Some((v, idx)) = best {
                        out[o] = v;
                        arg[o] = bc * h * w + idx;
                    }
                }
            }
        }
        let y = Tensor::result(vec![b, c, oh, ow], out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for (o, &a) in arg.iter().enumerate() {
                            if a != usize::MAX {
                                gx[a] += dy[o];
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Average pooling to a target size no larger than the input.
    pub fn avgpool_to(&self, x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
        let (_, _, h, w) = dims4("avgpool_to", x)?;
        if oh > h || ow > w {
            return Err(TensorError::param(
                "avgpool_to",
                format!("requested output {oh}x{ow} larger than input {h}x{w}"),
            ));
        }
        self.adaptive_avg_pool2d(x, oh, ow)
    }

    /// Adaptive average pooling; output may be larger than the input, in
    /// which case source rows/columns are revisited.
    pub fn adaptive_avg_pool2d(&self, x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
        let (b, c, h, w) = dims4("adaptive_avg_pool2d", x)?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::param("adaptive_avg_pool2d", "output size must be positive"));
        }
        let dx = x.data_rc();
        let mut out = vec![E::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let img = &dx[bc * h * w..(bc + 1) * h * w];
            for oi in 0..oh {
                let (y0, y1) = adaptive_window(oi, h, oh);
                for oj in 0..ow {
                    let (x0, x1) = adaptive_window(oj, w, ow);
                    let mut s = E::ZERO;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            s += img[iy * w + ix];
                        }
                    }
                    let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                    out[bc * oh * ow + oi * ow + oj] = s * E::from_f64(1.0 / cnt);
                }
            }
        }
        let y = Tensor::result(vec![b, c, oh, ow], out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for bc in 0..b * c {
                            for oi in 0..oh {
                                let (y0, y1) = adaptive_window(oi, h, oh);
                                for oj in 0..ow {
                                    let (x0, x1) = adaptive_window(oj, w, ow);
                                    let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                                    let d = dy[bc * oh * ow + oi * ow + oj]
                                        * E::from_f64(1.0 / cnt);
                                    for iy in y0..y1 {
                                        for ix in x0..x1 {
                                            gx[bc * h * w + iy * w + ix] += d;
                                        }
                                    }
                                }
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
        let (b, c, h, w) = dims4("upsample_nearest", x)?;
        if factor == 0 {
            return Err(TensorError::param("upsample_nearest", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let dx = x.data_rc();
        let mut out = vec![E::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            for oi in 0..oh {
                for oj in 0..ow {
                    out[bc * oh * ow + oi * ow + oj] = dx[bc * h * w + (oi / factor) * w + oj / factor];
                }
            }
        }
        let y = Tensor::result(vec![b, c, oh, ow], out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for bc in 0..b * c {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    gx[bc * h * w + (oi / factor) * w + oj / factor] +=
                                        dy[bc * oh * ow + oi * ow + oj];
                                }
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Bilinear resize with half-pixel-centre alignment. Identity when the
    /// sizes match.
    pub fn resize_bilinear(&self, x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
        let (b, c, h, w) = dims4("resize_bilinear", x)?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::param("resize_bilinear", "output size must be positive"));
        }
        // (index, fraction) per output row/column
        let axis_map = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
            (0..out_len)
                .map(|i| {
                    let s = (i as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
                    let s = s.clamp(0.0, (in_len - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(in_len - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let ymap = axis_map(oh, h);
        let xmap = axis_map(ow, w);
        let dx = x.data_rc();
        let mut out = vec![E::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let img = &dx[bc * h * w..(bc + 1) * h * w];
            for (oi, &(y0, y1, fy)) in ymap.iter().enumerate() {
                for (oj, &(x0, x1, fx)) in xmap.iter().enumerate() {
                    let v00 = img[y0 * w + x0].to_f64();
                    let v01 = img[y0 * w + x1].to_f64();
                    let v10 = img[y1 * w + x0].to_f64();
                    let v11 = img[y1 * w + x1].to_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    out[bc * oh * ow + oi * ow + oj] = E::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        let y = Tensor::result(vec![b, c, oh, ow], out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for bc in 0..b * c {
                            for (oi, &(y0, y1, fy)) in ymap.iter().enumerate() {
                                for (oj, &(x0, x1, fx)) in xmap.iter().enumerate() {
                                    let d = dy[bc * oh * ow + oi * ow + oj].to_f64();
                                    let base = bc * h * w;
                                    gx[base + y0 * w + x0] +=
                                        E::from_f64(d * (1.0 - fy) * (1.0 - fx));
                                    gx[base + y0 * w + x1] += E::from_f64(d * (1.0 - fy) * fx);
                                    gx[base + y1 * w + x0] += E::from_f64(d * fy * (1.0 - fx));
                                    gx[base + y1 * w + x1] += E::from_f64(d * fy * fx);
                                }
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    /// Max over the spatial axes: [B, C, H, W] -> [B, C].
    pub fn global_max_pool(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (b, c, h, w) = dims4("global_max_pool", x)?;
        let dx = x.data_rc();
        let mut out = vec![E::ZERO; b * c];
        let mut arg = vec![0usize; b * c];
        for bc in 0..b * c {
            let img = &dx[bc * h * w..(bc + 1) * h * w];
            let mut best = img[0];
            let mut bi = 0usize;
            for (i, &v) in img.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out[bc] = best;
            arg[bc] = bc * h * w + bi;
        }
        let y = Tensor::result(vec![b, c], out, self.tracks(&[x]));
        if self.tracks(&[x]) {
            let (x2, y2) = (x.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    x2.accum_grad(|gx| {
                        for (o, &a) in arg.iter().enumerate() {
                            gx[a] += dy[o];
                        }
                    });
                });
            });
        }
        Ok(y)
    }
}
