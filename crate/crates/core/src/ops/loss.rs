//! Cross-entropy over logits, with optional two-way soft targets (mixup).

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::{Graph, Tensor};

/// Classification target for one sample. `Mixed` carries the convex pair
/// produced by mixup: weight `lam` on `a`, `1 - lam` on `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Hard(usize),
    Mixed { a: usize, b: usize, lam: f64 },
}

impl Target {
    fn pairs(&self) -> [(usize, f64); 2] {
        match *self {
            Target::Hard(a) => [(a, 1.0), (a, 0.0)],
            Target::Mixed { a, b, lam } => [(a, lam), (b, 1.0 - lam)],
        }
    }

    fn max_class(&self) -> usize {
        match *self {
            Target::Hard(a) => a,
            Target::Mixed { a, b, .. } => a.max(b),
        }
    }
}

impl<E: Elem> Graph<E> {
    /// Mean over the batch of -log softmax(logits)[target]. The gradient is
    /// (softmax - target) / B.
    pub fn cross_entropy(&self, logits: &Tensor<E>, targets: &[Target]) -> Result<Tensor<E>> {
        let (b, k) = match logits.shape() {
            [b, k] => (*b, *k),
            other => {
                return Err(TensorError::param(
                    "cross_entropy",
                    format!("logits must be [B, K], got {other:?}"),
                ))
            }
        };
        if targets.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                axis: 0,
                expected: b,
                got: targets.len(),
            });
        }
        for t in targets {
            if t.max_class() >= k {
                return Err(TensorError::LabelOutOfRange {
                    label: t.max_class(),
                    classes: k,
                });
            }
        }
        let dx = logits.data_rc();
        let mut total = 0.0f64;
        // log-sum-exp per row with max subtraction
        let mut lses = vec![0.0f64; b];
        let mut maxes = vec![0.0f64; b];
        for r in 0..b {
            let row = &dx[r * k..(r + 1) * k];
            let mut m = row[0].to_f64();
            for &v in row {
                m = m.max(v.to_f64());
            }
            let mut s = 0.0f64;
            for &v in row {
                s += (v.to_f64() - m).exp();
            }
            let lse = m + s.ln();
            lses[r] = lse;
            maxes[r] = m;
            for (cls, wt) in targets[r].pairs() {
                if wt != 0.0 {
                    total += wt * (lse - dx[r * k + cls].to_f64());
                }
            }
        }
        let loss = E::from_f64(total / b as f64);
        let y = Tensor::result(vec![], vec![loss], self.tracks(&[logits]));
        if self.tracks(&[logits]) {
            let (x2, y2) = (logits.clone(), y.clone());
            let targets = targets.to_vec();
            self.record(move || {
                y2.with_grad(|dyv| {
                    let dy = dyv[0].to_f64();
                    let dx = x2.data_rc();
                    x2.accum_grad(|gx| {
                        let inv_b = 1.0 / b as f64;
                        for r in 0..b {
                            let lse = lses[r];
                            for j in 0..k {
                                let p = (dx[r * k + j].to_f64() - lse).exp();
                                gx[r * k + j] += E::from_f64(dy * p * inv_b);
                            }
                            for (cls, wt) in targets[r].pairs() {
                                if wt != 0.0 {
                                    gx[r * k + cls] -= E::from_f64(dy * wt * inv_b);
                                }
                            }
                        }
                    });
                });
            });
        }
        Ok(y)
    }
}
