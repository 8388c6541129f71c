//! AdamW with decoupled weight decay and the warmup-cosine learning-rate
//! schedule.

use glvm_core::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One decoupled-decay Adam step on a single parameter buffer.
/// w <- w - lr*wd*w - lr*mhat/(sqrt(vhat)+eps); with a zero gradient and
/// zero moments this shrinks the weights by exactly (1 - lr*wd).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    w: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(w.len(), grad.len());
    let b1c = 1.0 - BETA1.powi(t as i32);
    let b2c = 1.0 - BETA2.powi(t as i32);
    for i in 0..w.len() {
        let g = grad[i] as f64;
        let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * g;
        let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mhat = mi / b1c;
        let vhat = vi / b2c;
        let wi = w[i] as f64;
        w[i] = (wi - lr * weight_decay * wi - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
    }
}

/// Optimizer state over an ordered parameter list.
pub struct AdamW {
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(param_sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Restore from externally held moments (supernet slices).
    pub fn from_state(m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, t: u64, weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            t,
            m,
            v,
        }
    }

    pub fn into_state(self) -> (Vec<Vec<f32>>, Vec<Vec<f32>>, u64) {
        (self.m, self.v, self.t)
    }

    /// Apply one step to parameters in list order; `grads[i]` pairs with
    /// `params[i]`.
    pub fn step(&mut self, params: &[&Tensor<f32>], grads: &[Vec<f32>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let wd = self.weight_decay;
            let t = self.t;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.update_data(|w| adamw_update(w, g, m, v, t, lr, wd));
        }
    }
}

/// Warmup-cosine schedule over epochs: linear 0 -> lr_max during warmup,
/// then cosine down to lr_min at the final epoch.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl Schedule {
    pub fn standard(total_epochs: usize) -> Self {
        Schedule {
            lr_max: 1e-3,
            lr_min: 1e-4,
            warmup_epochs: 5.0,
            total_epochs: total_epochs as f64,
        }
    }

    /// Learning rate at a fractional epoch position in [0, total].
    pub fn lr_at(&self, pos: f64) -> f64 {
        if self.warmup_epochs > 0.0 && pos < self.warmup_epochs {
            return self.lr_max * (pos / self.warmup_epochs);
        }
        let span = (self.total_epochs - self.warmup_epochs).max(f64::EPSILON);
        let frac = ((pos - self.warmup_epochs) / span).clamp(0.0, 1.0);
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
