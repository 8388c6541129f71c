//! The weight-entangled supernet: one maximal-dimension weight store whose
//! banks every candidate architecture reads as leading (prefix) slices along
//! each searchable axis. Two configs sharing a candidate dimension at a
//! layer therefore read byte-identical weight values, and a training step on
//! one subnet updates exactly the slice it read.
//!
//! Head width varies with the head count (D_h = E*D/T), so each head slot's
//! bank is sized by the widest configuration that uses that slot; no single
//! network covers every bank completely, but every bank is exactly covered
//! by some maximal configuration.

use std::collections::{BTreeMap, HashMap};

use glvm_core::glvm::{weight_descs, GlvmConfig, GlvmWeights, Init, Mode};
use glvm_core::space::{ArchConfig, LocalGenes, SpaceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::SearchError;

pub struct Bank {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Adam first/second moments, entangled exactly like the weights.
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub trainable: bool,
}

impl Bank {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub struct Supernet {
    pub space: SpaceSpec,
    pub classes: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub banks: BTreeMap<String, Bank>,
    /// Global optimizer step (Adam bias correction).
    pub step: u64,
}

/// Local gene combos that can actually build at embedding width `d`:
/// E*D integer and divisible by T.
pub fn buildable_locals(spec: &SpaceSpec, d: usize) -> Vec<LocalGenes> {
    spec.local_combos()
        .into_iter()
        .filter(|l| {
            let num = l.expand.numer() * d as i64;
            let den = *l.expand.denom();
            num > 0 && num % den == 0 && (num / den) % l.heads as i64 == 0
        })
        .collect()
}

/// The default local triple used wherever a locals list must be extended
/// deterministically: (T, E, V) = (4, 2, 16).
pub fn default_local() -> LocalGenes {
    LocalGenes {
        heads: 4,
        expand: num_rational::Rational64::from_integer(2),
        state: 16,
    }
}

pub fn to_glvm(cfg: &ArchConfig, classes: usize, patch: usize, in_channels: usize) -> GlvmConfig {
    let mut g = GlvmConfig::new(cfg, patch, Mode::DualFiu, classes);
    g.in_channels = in_channels;
    g
}

impl Supernet {
    /// Allocate and initialize the maximal banks. Bank shapes are the
    /// elementwise maximum of the weight layout over every depth and head
    /// count at the maximal channel/embedding/expand/state values.
    pub fn new(
        space: SpaceSpec,
        classes: usize,
        patch: usize,
        in_channels: usize,
        seed: u64,
    ) -> Result<Self, SearchError> {
        space.validate_rows().map_err(|e| SearchError::Space(e.to_string()))?;
        let c_max = *space.channel_values().iter().max().unwrap();
        let d_max = *space.embed_values().iter().max().unwrap();
        let e_max = *space.expand_values().iter().max().unwrap();
        let v_max = *space.state_values().iter().max().unwrap();

        let mut shapes: BTreeMap<String, (Vec<usize>, Init, bool)> = BTreeMap::new();
        for n in space.depths() {
            for &t in &space.head_values() {
                let locals = vec![
                    LocalGenes {
                        heads: t,
                        expand: e_max,
                        state: v_max,
                    };
                    n
                ];
                let arch = ArchConfig {
                    depth: n,
                    channels: c_max,
                    embed_dim: d_max,
                    locals,
                };
                let gcfg = to_glvm(&arch, classes, patch, in_channels);
                if gcfg.check_buildable().is_err() {
                    continue; // head count incompatible with the max width
                }
                for desc in weight_descs(&gcfg).map_err(SearchError::Core)? {
                    shapes
                        .entry(desc.name.clone())
                        .and_modify(|(shape, _, _)| {
                            for (a, b) in shape.iter_mut().zip(&desc.shape) {
                                *a = (*a).max(*b);
                            }
                        })
                        .or_insert((desc.shape.clone(), desc.init, desc.trainable));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut banks = BTreeMap::new();
        for (name, (shape, init, trainable)) in shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::UniformFan(fan) => {
                    let k = 1.0 / (fan.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-k..k) as f32).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Ladder { .. } => {
                    // per-row ladder across the trailing (state) axis
                    let v = *shape.last().unwrap();
                    let mut out = Vec::with_capacity(n);
                    for _ in 0..n / v {
                        for vi in 0..v {
                            out.push(-((vi + 1) as f32));
                        }
                    }
                    out
                }
                Init::DtBias => (0..n)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let dt = ((1e-3f64).ln() + u * ((1e-1f64).ln() - (1e-3f64).ln())).exp();
                        (dt.exp() - 1.0).ln() as f32
                    })
                    .collect(),
                Init::Token => (0..n).map(|_| rng.random_range(-0.02..0.02) as f32).collect(),
            };
            banks.insert(
                name,
                Bank {
                    m: vec![0.0; data.len()],
                    v: vec![0.0; data.len()],
                    shape,
                    data,
                    trainable,
                },
            );
        }
        Ok(Supernet {
            space,
            classes,
            patch,
            in_channels,
            banks,
            step: 0,
        })
    }

    pub fn total_bank_values(&self) -> usize {
        self.banks.values().map(|b| b.numel()).sum()
    }

    /// Inherit the weights of one candidate: for every weight tensor, the
    /// leading slice along each searchable axis (first C channels, first D
    /// embedding dims, first T*D_h expanded dims, first V states); depth
    /// takes the first N blocks. Off-layout configs fail with the
    /// underlying layout error.
    pub fn entangled_slice(&self, arch: &ArchConfig) -> Result<GlvmWeights<f32>, SearchError> {
        let gcfg = to_glvm(arch, self.classes, self.patch, self.in_channels);
        let descs = weight_descs(&gcfg).map_err(SearchError::Core)?;
        let mut values = HashMap::with_capacity(descs.len());
        for desc in &descs {
            let bank = self.banks.get(&desc.name).ok_or_else(|| {
                SearchError::Entangle(format!("no bank for weight {}", desc.name))
            })?;
            let mut out = vec![0.0f32; desc.numel()];
            load_prefix(&bank.shape, &bank.data, &desc.shape, &mut out);
            values.insert(desc.name.clone(), out);
        }
        GlvmWeights::from_named(gcfg, values).map_err(SearchError::Core)
    }

    /// Write a subnet's weights (and buffers) back into the bank prefixes.
    pub fn write_back(&mut self, w: &GlvmWeights<f32>) -> Result<(), SearchError> {
        for (desc, tensor) in w.entries() {
            let bank = self.banks.get_mut(&desc.name).ok_or_else(|| {
                SearchError::Entangle(format!("no bank for weight {}", desc.name))
            })?;
            let data = tensor.to_vec();
            store_prefix(&bank.shape, &mut bank.data, &desc.shape, &data);
        }
        Ok(())
    }

    /// Slice the optimizer moments for the trainable entries, in layout
    /// order.
    pub fn slice_moments(&self, w: &GlvmWeights<f32>) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        for (desc, _) in w.params() {
            let bank = &self.banks[&desc.name];
            let mut m = vec![0.0f32; desc.numel()];
            let mut v = vec![0.0f32; desc.numel()];
            load_prefix(&bank.shape, &bank.m, &desc.shape, &mut m);
            load_prefix(&bank.shape, &bank.v, &desc.shape, &mut v);
            ms.push(m);
            vs.push(v);
        }
        (ms, vs)
    }

    pub fn write_back_moments(
        &mut self,
        w: &GlvmWeights<f32>,
        ms: &[Vec<f32>],
        vs: &[Vec<f32>],
    ) {
        for (i, (desc, _)) in w.params().enumerate() {
            let bank = self.banks.get_mut(&desc.name).unwrap();
            store_prefix(&bank.shape, &mut bank.m, &desc.shape, &ms[i]);
            store_prefix(&bank.shape, &mut bank.v, &desc.shape, &vs[i]);
        }
    }

    /// Flat copy of all bank data (snapshot tests).
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f32>> {
        self.banks
            .iter()
            .map(|(k, b)| (k.clone(), b.data.clone()))
            .collect()
    }

    /// Index ranges (per bank) covered by a config's slice.
    pub fn slice_mask(&self, arch: &ArchConfig) -> Result<BTreeMap<String, Vec<bool>>, SearchError> {
        let gcfg = to_glvm(arch, self.classes, self.patch, self.in_channels);
        let descs = weight_descs(&gcfg).map_err(SearchError::Core)?;
        let mut masks: BTreeMap<String, Vec<bool>> = self
            .banks
            .iter()
            .map(|(k, b)| (k.clone(), vec![false; b.numel()]))
            .collect();
        for desc in &descs {
            let bank = &self.banks[&desc.name];
            let mask = masks.get_mut(&desc.name).unwrap();
            mark_prefix(&bank.shape, &desc.shape, mask);
        }
        Ok(masks)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Read the leading `sub_shape` block of a row-major bank into `out`.
pub fn load_prefix(bank_shape: &[usize], bank: &[f32], sub_shape: &[usize], out: &mut [f32]) {
    debug_assert_eq!(bank_shape.len(), sub_shape.len());
    debug_assert!(bank_shape.iter().zip(sub_shape).all(|(b, s)| s <= b));
    let bs = strides(bank_shape);
    let rank = sub_shape.len();
    if rank == 0 {
        out[0] = bank[0];
        return;
    }
    let inner = sub_shape[rank - 1];
    let rows: usize = sub_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for r in 0..rows {
        let mut off = 0usize;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * bs[i];
        }
        out[r * inner..(r + 1) * inner].copy_from_slice(&bank[off..off + inner]);
        for i in (0..rank - 1).rev() {
            idx[i] += 1;
            if idx[i] < sub_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

/// Write `src` into the leading `sub_shape` block of a row-major bank.
pub fn store_prefix(bank_shape: &[usize], bank: &mut [f32], sub_shape: &[usize], src: &[f32]) {
    debug_assert_eq!(bank_shape.len(), sub_shape.len());
    let bs = strides(bank_shape);
    let rank = sub_shape.len();
    if rank == 0 {
        bank[0] = src[0];
        return;
    }
    let inner = sub_shape[rank - 1];
    let rows: usize = sub_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for r in 0..rows {
        let mut off = 0usize;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * bs[i];
        }
        bank[off..off + inner].copy_from_slice(&src[r * inner..(r + 1) * inner]);
        for i in (0..rank - 1).rev() {
            idx[i] += 1;
            if idx[i] < sub_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

fn mark_prefix(bank_shape: &[usize], sub_shape: &[usize], mask: &mut [bool]) {
    let bs = strides(bank_shape);
    let rank = sub_shape.len();
    if rank == 0 {
        mask[0] = true;
        return;
    }
    let inner = sub_shape[rank - 1];
    let rows: usize = sub_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..rows {
        let mut off = 0usize;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * bs[i];
        }
        for m in mask[off..off + inner].iter_mut() {
            *m = true;
        }
        for i in (0..rank - 1).rev() {
            idx[i] += 1;
            if idx[i] < sub_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}
