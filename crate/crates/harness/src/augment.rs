//! Training-time augmentation: small rotations, scaling, horizontal flips,
//! crop-with-padding translation, brightness/contrast jitter, and batch
//! mixup with Beta-distributed weights and soft labels.

use glvm_core::ops::Target;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    /// Rotation range in degrees (plus/minus).
    pub rotate_deg: Option<f64>,
    /// Scale factor range.
    pub scale: Option<(f64, f64)>,
    pub hflip: bool,
    /// Random-crop padding in pixels (translation range).
    pub crop_pad: Option<usize>,
    /// Brightness shift range (plus/minus).
    pub brightness: Option<f64>,
    /// Contrast factor range (plus/minus around 1).
    pub contrast: Option<f64>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotate_deg: Some(15.0),
            scale: Some((0.9, 1.1)),
            hflip: true,
            crop_pad: Some(4),
            brightness: Some(0.2),
            contrast: Some(0.2),
        }
    }
}

impl AugmentPolicy {
    /// Geometry-only policy (no photometric jitter).
    pub fn geometric() -> Self {
        AugmentPolicy {
            brightness: None,
            contrast: None,
            ..Default::default()
        }
    }

    /// Mild policy for quick desk-scale runs.
    pub fn light() -> Self {
        AugmentPolicy {
            rotate_deg: Some(6.0),
            scale: Some((0.95, 1.05)),
            hflip: false,
            crop_pad: Some(2),
            brightness: Some(0.08),
            contrast: Some(0.08),
        }
    }
}

fn sample_clamped(px: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let v00 = px[y0 * w + x0] as f64;
    let v01 = px[y0 * w + x1] as f64;
    let v10 = px[y1 * w + x0] as f64;
    let v11 = px[y1 * w + x1] as f64;
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// Apply the policy to one [H*W] image; geometric ops keep the size.
pub fn augment_image(
    px: &[f32],
    h: usize,
    w: usize,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let theta = policy
        .rotate_deg
        .map(|d| rng.random_range(-d..d).to_radians())
        .unwrap_or(0.0);
    let scale = policy
        .scale
        .map(|(lo, hi)| rng.random_range(lo..hi))
        .unwrap_or(1.0);
    let flip = policy.hflip && rng.random::<bool>();
    let (tx, ty) = policy
        .crop_pad
        .map(|p| {
            let p = p as f64;
            (rng.random_range(-p..=p), rng.random_range(-p..=p))
        })
        .unwrap_or((0.0, 0.0));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());

    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let xo = if flip { (w - 1 - x) as f64 } else { x as f64 };
            let yo = y as f64;
            // inverse map: undo translation, then rotation+scale about center
            let (dx, dy) = (xo - cx - tx, yo - cy - ty);
            let sx = (cos_t * dx + sin_t * dy) / scale + cx;
            let sy = (-sin_t * dx + cos_t * dy) / scale + cy;
            out.push(sample_clamped(px, h, w, sy, sx) as f32);
        }
    }

    let bshift = policy
        .brightness
        .map(|b| rng.random_range(-b..b))
        .unwrap_or(0.0);
    let cfactor = policy
        .contrast
        .map(|c| 1.0 + rng.random_range(-c..c))
        .unwrap_or(1.0);
    if bshift != 0.0 || cfactor != 1.0 {
        for v in out.iter_mut() {
            let x = (*v as f64 - 0.5) * cfactor + 0.5 + bshift;
            *v = x.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// lambda ~ Beta(alpha, alpha).
pub fn mixup_lambda(alpha: f64, rng: &mut ChaCha8Rng) -> f64 {
    let beta = Beta::new(alpha, alpha).expect("alpha must be positive");
    beta.sample(rng)
}

/// Mix each sample with a random partner: x~ = lam*x_i + (1-lam)*x_j with
/// the soft label (lam, 1-lam).
pub fn mixup_batch(
    images: &mut [Vec<f32>],
    labels: &[usize],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Target> {
    let n = images.len();
    let originals = images.to_vec();
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.random_range(0..n);
        let lam = mixup_lambda(alpha, rng);
        for (d, &s) in images[i].iter_mut().zip(&originals[j]) {
            *d = (lam as f32) * *d + (1.0 - lam as f32) * s;
        }
        if lam >= 1.0 || i == j {
            targets.push(Target::Hard(labels[i]));
        } else {
            targets.push(Target::Mixed {
                a: labels[i],
                b: labels[j],
                lam,
            });
        }
    }
    targets
}
