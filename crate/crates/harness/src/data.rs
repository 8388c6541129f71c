//! Synthetic vein-like image data: per class a latent skeleton of smooth
//! dark curves on a bright textured background, rendered per image with
//! elastic jitter, brightness shift and additive Gaussian noise. Fully
//! deterministic under the dataset seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            classes: 20,
            n_train: 10,
            n_val: 5,
            n_test: 5,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub class: usize,
    /// Row-major [H*W] grayscale in [0, 1].
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct VeinDataset {
    pub spec: DataSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl VeinDataset {
    pub fn split(&self, name: &str) -> Option<&[Sample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

struct Curve {
    points: Vec<(f64, f64)>,
    sigma: f64,
    depth: f64,
}

struct Skeleton {
    curves: Vec<Curve>,
}

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn image_rng(seed: u64, class: usize, split: u64, index: usize) -> ChaCha8Rng {
    let mix = seed
        ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ split.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(mix)
}

fn make_skeleton(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Skeleton {
    let n_curves = rng.random_range(2..=4);
    let mut curves = Vec::with_capacity(n_curves);
    for _ in 0..n_curves {
        let n_pts = rng.random_range(4..=6);
        // a curve wanders across the image, mostly left-to-right or
        // top-to-bottom
        let horizontal = rng.random::<bool>();
        let mut points = Vec::with_capacity(n_pts);
        for i in 0..n_pts {
            let along = (i as f64 + rng.random_range(-0.2..0.2)) / (n_pts - 1) as f64;
            let across = rng.random_range(0.12..0.88);
            let (x, y) = if horizontal {
                (along * (w as f64 - 1.0), across * (h as f64 - 1.0))
            } else {
                (across * (w as f64 - 1.0), along * (h as f64 - 1.0))
            };
            points.push((x, y));
        }
        curves.push(Curve {
            points,
            sigma: rng.random_range(1.0..2.2),
            depth: rng.random_range(0.30..0.55),
        });
    }
    Skeleton { curves }
}

/// Catmull-Rom interpolation through the control points, clamped ends.
fn spline_samples(points: &[(f64, f64)], per_segment: usize) -> Vec<(f64, f64)> {
    let n = points.len();
    let get = |i: isize| -> (f64, f64) {
        let i = i.clamp(0, n as isize - 1) as usize;
        points[i]
    };
    let mut out = Vec::with_capacity((n - 1) * per_segment + 1);
    for seg in 0..n - 1 {
        let p0 = get(seg as isize - 1);
        let p1 = get(seg as isize);
        let p2 = get(seg as isize + 1);
        let p3 = get(seg as isize + 2);
        for s in 0..per_segment {
            let t = s as f64 / per_segment as f64;
            let t2 = t * t;
            let t3 = t2 * t;
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * ((2.0 * b)
                    + (-a + c) * t
                    + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                    + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(points[n - 1]);
    out
}

fn render(skeleton: &Skeleton, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    // bright background with coarse low-frequency texture
    let grid = 8usize;
    let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            // bilinear sample of the coarse grid
            let gy = y as f64 / h as f64 * (grid - 1) as f64;
            let gx = x as f64 / w as f64 * (grid - 1) as f64;
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let v = coarse[y0 * grid + x0] * (1.0 - fy) * (1.0 - fx)
                + coarse[y0 * grid + x1] * (1.0 - fy) * fx
                + coarse[y1 * grid + x0] * fy * (1.0 - fx)
                + coarse[y1 * grid + x1] * fy * fx;
            img[y * w + x] = 0.85 + 0.05 * v;
        }
    }

    // vein mask: max-composited Gaussian stamps along the jittered curves
    let jitter = 1.2;
    let (dx, dy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let mut mask = vec![0.0f64; h * w];
    for curve in &skeleton.curves {
        let jittered: Vec<(f64, f64)> = curve
            .points
            .iter()
            .map(|&(x, y)| {
                (
                    x + dx + rng.random_range(-jitter..jitter),
                    y + dy + rng.random_range(-jitter..jitter),
                )
            })
            .collect();
        let samples = spline_samples(&jittered, 24);
        let r = (3.0 * curve.sigma).ceil() as isize;
        let two_s2 = 2.0 * curve.sigma * curve.sigma;
        for &(cx, cy) in &samples {
            let (ix, iy) = (cx.round() as isize, cy.round() as isize);
            for py in (iy - r).max(0)..=(iy + r).min(h as isize - 1) {
                for px in (ix - r).max(0)..=(ix + r).min(w as isize - 1) {
                    let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
                    let m = curve.depth * (-d2 / two_s2).exp();
                    let idx = py as usize * w + px as usize;
                    if m > mask[idx] {
                        mask[idx] = m;
                    }
                }
            }
        }
    }

    // darken, shift brightness, add Gaussian pixel noise
    let bshift = rng.random_range(-0.06..0.06);
    let mut out = Vec::with_capacity(h * w);
    let mut spare: Option<f64> = None;
    let mut gauss = |rng: &mut ChaCha8Rng| -> f64 {
        if let Some(v) = spare.take() {
            return v;
        }
        let (u1, u2): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random::<f64>());
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        spare = Some(r * th.sin());
        r * th.cos()
    };
    for i in 0..h * w {
        let v = img[i] - mask[i] + bshift + 0.02 * gauss(rng);
        out.push(v.clamp(0.0, 1.0) as f32);
    }
    out
}

/// Deterministic dataset generation: same spec (including seed) gives
/// bit-identical pixels. Splits are disjoint renders of the same per-class
/// skeletons.
pub fn generate(spec: &DataSpec) -> Result<VeinDataset, HarnessError> {
    if spec.classes < 2 {
        return Err(HarnessError::BadSpec("need at least two classes".into()));
    }
    let (h, w) = (spec.height, spec.width);
    let mut train = Vec::with_capacity(spec.classes * spec.n_train);
    let mut val = Vec::with_capacity(spec.classes * spec.n_val);
    let mut test = Vec::with_capacity(spec.classes * spec.n_test);
    for class in 0..spec.classes {
        let skeleton = make_skeleton(&mut class_rng(spec.seed, class), h, w);
        for (split_id, (n, bucket)) in [
            (spec.n_train, &mut train),
            (spec.n_val, &mut val),
            (spec.n_test, &mut test),
        ]
        .into_iter()
        .enumerate()
        {
            for index in 0..n {
                let mut rng = image_rng(spec.seed, class, split_id as u64, index);
                bucket.push(Sample {
                    class,
                    pixels: render(&skeleton, h, w, &mut rng),
                });
            }
        }
    }
    Ok(VeinDataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DataSpec,
    /// split name -> list of (class, relative path)
    files: BTreeMap<String, Vec<(usize, String)>>,
}

/// Write one directory per class with 8-bit grayscale PNGs plus a manifest
/// listing the splits.
pub fn save_dir(ds: &VeinDataset, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut files: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        let mut list = Vec::with_capacity(split.len());
        for s in split {
            let i = per_class.entry(s.class).or_insert(0);
            let rel = format!("class_{:03}/{name}_{:02}.png", s.class, i);
            *i += 1;
            let path = dir.join(&rel);
            fs::create_dir_all(path.parent().unwrap())?;
            let bytes: Vec<u8> = s
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let img =
                image::GrayImage::from_raw(ds.spec.width as u32, ds.spec.height as u32, bytes)
                    .ok_or_else(|| HarnessError::BadSpec("image buffer size".into()))?;
            img.save(&path)
                .map_err(|e| HarnessError::Io(format!("saving {}: {e}", path.display())))?;
            list.push((s.class, rel));
        }
        files.insert(name.to_string(), list);
    }
    let manifest = Manifest {
        spec: ds.spec.clone(),
        files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest"),
    )?;
    Ok(())
}

/// Load a dataset directory written by `save_dir`.
pub fn load_dir(dir: &Path) -> Result<VeinDataset, HarnessError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| HarnessError::Io(format!("manifest: {e}")))?;
    let mut splits: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for (name, list) in &manifest.files {
        let mut samples = Vec::with_capacity(list.len());
        for (class, rel) in list {
            let path = dir.join(rel);
            let img = image::open(&path)
                .map_err(|e| HarnessError::Io(format!("loading {}: {e}", path.display())))?
                .to_luma8();
            if (img.width() as usize, img.height() as usize)
                != (manifest.spec.width, manifest.spec.height)
            {
                return Err(HarnessError::BadSpec(format!(
                    "{} has size {}x{}, manifest says {}x{}",
                    path.display(),
                    img.width(),
                    img.height(),
                    manifest.spec.width,
                    manifest.spec.height
                )));
            }
            samples.push(Sample {
                class: *class,
                pixels: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
            });
        }
        splits.insert(name.clone(), samples);
    }
    Ok(VeinDataset {
        spec: manifest.spec,
        train: splits.remove("train").unwrap_or_default(),
        val: splits.remove("val").unwrap_or_default(),
        test: splits.remove("test").unwrap_or_default(),
    })
}
