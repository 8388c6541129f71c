//! The architecture search space: hyperparameter grids over (min, max,
//! interval) rows, exact space-size arithmetic, uniform sampling, and the
//! mutation/crossover operators used by the evolutionary search.
//!
//! Values are exact rationals so the half-integer expand-ratio grid never
//! drifts; every value on the grid is also exactly representable as an f64,
//! which keeps the JSON round trip lossless.

use std::fmt;

use num_bigint::BigUint;
use num_rational::Rational64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("hyperparameter {name}: {msg}")]
    BadRow { name: String, msg: String },
    #[error("value {value} of {name} is not on the candidate grid")]
    OffGrid { name: String, value: String },
    #[error("config has {got} local triples, expected depth {expected}")]
    LocalLen { expected: usize, got: usize },
    #[error("{0}")]
    Io(String),
}

/// Exact conversion f64 -> rational. Finite f64 values are dyadic rationals,
/// so this is lossless (errors only if the value needs more than i64 bits).
pub fn rational_from_f64(v: f64) -> Option<Rational64> {
    if !v.is_finite() {
        return None;
    }
    if v == 0.0 {
        return Some(Rational64::new(0, 1));
    }
    let bits = v.to_bits();
    let sign: i64 = if bits >> 63 == 1 { -1 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut mant, mut e2) = if exp == 0 {
        (frac as i128, -1074i64)
    } else {
        ((frac | (1u64 << 52)) as i128, exp - 1075)
    };
    while mant != 0 && mant % 2 == 0 {
        mant /= 2;
        e2 += 1;
    }
    if e2 >= 0 {
        let scaled = mant.checked_mul(1i128.checked_shl(e2 as u32)?)?;
        let n = i64::try_from(scaled).ok()?;
        Some(Rational64::new(sign * n, 1))
    } else {
        if -e2 > 62 {
            return None;
        }
        let den = 1i64 << (-e2);
        let n = i64::try_from(mant).ok()?;
        Some(Rational64::new(sign * n, den))
    }
}

pub fn rational_to_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// One grid row: candidates are min, min+interval, ..., up to max.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridRow {
    pub name: String,
    pub min: Rational64,
    pub max: Rational64,
    pub interval: Rational64,
}

impl GridRow {
    pub fn new(name: &str, min: f64, max: f64, interval: f64) -> Self {
        GridRow {
            name: name.to_string(),
            min: rational_from_f64(min).expect("grid min must be finite"),
            max: rational_from_f64(max).expect("grid max must be finite"),
            interval: rational_from_f64(interval).expect("grid interval must be finite"),
        }
    }

    /// floor((max-min)/interval) + 1 candidates.
    pub fn values(&self) -> Vec<Rational64> {
        let mut out = Vec::new();
        let mut v = self.min;
        while v <= self.max {
            out.push(v);
            v += self.interval;
        }
        out
    }

    pub fn count(&self) -> usize {
        self.values().len()
    }

    fn validate(&self) -> Result<(), SpaceError> {
        if self.interval <= Rational64::new(0, 1) || self.max < self.min {
            return Err(SpaceError::BadRow {
                name: self.name.clone(),
                msg: format!("bad (min, max, interval) = ({}, {}, {})", self.min, self.max, self.interval),
            });
        }
        if self.values().is_empty() {
            return Err(SpaceError::BadRow {
                name: self.name.clone(),
                msg: "empty candidate set".into(),
            });
        }
        Ok(())
    }
}

/// Serialized row form: plain numbers, matching the grid table layout.
#[derive(Serialize, Deserialize)]
struct RowFile {
    name: String,
    min: f64,
    max: f64,
    interval: f64,
}

/// The whole search space: three global rows (depth N, stem channels C,
/// embedding dim D) and three per-block local rows (heads T, expand ratio E,
/// state size V).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceSpec {
    pub depth: GridRow,
    pub channels: GridRow,
    pub embed_dim: GridRow,
    pub heads: GridRow,
    pub expand: GridRow,
    pub state: GridRow,
}

impl SpaceSpec {
    /// The production search space: N in (6,12,3), C in (32,128,32),
    /// D in (128,384,64); T in (2,6,2), E in (1,2,0.5), V in (16,48,16).
    pub fn standard() -> Self {
        SpaceSpec {
            depth: GridRow::new("depth", 6.0, 12.0, 3.0),
            channels: GridRow::new("channels", 32.0, 128.0, 32.0),
            embed_dim: GridRow::new("embed_dim", 128.0, 384.0, 64.0),
            heads: GridRow::new("heads", 2.0, 6.0, 2.0),
            expand: GridRow::new("expand", 1.0, 2.0, 0.5),
            state: GridRow::new("state", 16.0, 48.0, 16.0),
        }
    }

    pub fn validate_rows(&self) -> Result<(), SpaceError> {
        for row in [&self.depth, &self.channels, &self.embed_dim, &self.heads, &self.expand, &self.state] {
            row.validate()?;
        }
        for row in [&self.depth, &self.channels, &self.embed_dim, &self.heads, &self.state] {
            for v in row.values() {
                if !v.is_integer() || *v.numer() <= 0 {
                    return Err(SpaceError::BadRow {
                        name: row.name.clone(),
                        msg: format!("{v} is not a positive integer"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn depths(&self) -> Vec<usize> {
        self.depth.values().iter().map(|v| *v.numer() as usize).collect()
    }
    pub fn channel_values(&self) -> Vec<usize> {
        self.channels.values().iter().map(|v| *v.numer() as usize).collect()
    }
    pub fn embed_values(&self) -> Vec<usize> {
        self.embed_dim.values().iter().map(|v| *v.numer() as usize).collect()
    }
    pub fn head_values(&self) -> Vec<usize> {
        self.heads.values().iter().map(|v| *v.numer() as usize).collect()
    }
    pub fn expand_values(&self) -> Vec<Rational64> {
        self.expand.values()
    }
    pub fn state_values(&self) -> Vec<usize> {
        self.state.values().iter().map(|v| *v.numer() as usize).collect()
    }

    /// Exact candidate count: S2 * S3 * sum_i (S4 S5 S6)^(N_i), where S2, S3
    /// count the channel and embedding grids and the sum runs over the depth
    /// candidates. For the standard grid this is 20*(27^6 + 27^9 + 27^12),
    /// about 3.0e18 networks.
    pub fn space_size(&self) -> Result<BigUint, SpaceError> {
        self.validate_rows()?;
        let s2 = BigUint::from(self.channels.count());
        let s3 = BigUint::from(self.embed_dim.count());
        let per_block = BigUint::from(self.heads.count() * self.expand.count() * self.state.count());
        let mut sum = BigUint::from(0u32);
        for n in self.depths() {
            sum += per_block.pow(n as u32);
        }
        Ok(s2 * s3 * sum)
    }

    /// Sizes of the two staged subspaces: (S1*S2*S3, (S4 S5 S6)^(max depth)).
    /// Their sum is the staged search-space size.
    pub fn stage_sizes(&self) -> Result<(BigUint, BigUint), SpaceError> {
        self.validate_rows()?;
        let global = BigUint::from(self.depth.count() * self.channels.count() * self.embed_dim.count());
        let per_block = BigUint::from(self.heads.count() * self.expand.count() * self.state.count());
        let nmax = self.depths().into_iter().max().unwrap_or(0);
        Ok((global, per_block.pow(nmax as u32)))
    }

    /// Exhaustive enumeration of every config in the space. Only sane for
    /// shrunken test specs; the caller is responsible for sizing.
    pub fn enumerate(&self) -> Vec<ArchConfig> {
        let mut out = Vec::new();
        let locals: Vec<LocalGenes> = self.local_combos();
        let k = locals.len();
        for n in self.depths() {
            for &c in &self.channel_values() {
                for &d in &self.embed_values() {
                    // mixed-radix counter over the n block slots
                    let mut idx = vec![0usize; n];
                    loop {
                        out.push(ArchConfig {
                            depth: n,
                            channels: c,
                            embed_dim: d,
                            locals: idx.iter().map(|&i| locals[i]).collect(),
                        });
                        let mut carry = n;
                        for pos in (0..n).rev() {
                            idx[pos] += 1;
                            if idx[pos] < k {
                                carry = pos;
                                break;
                            }
                            idx[pos] = 0;
                        }
                        if carry == n {
                            break;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn local_combos(&self) -> Vec<LocalGenes> {
        let mut out = Vec::new();
        for &t in &self.head_values() {
            for &e in &self.expand_values() {
                for &v in &self.state_values() {
                    out.push(LocalGenes { heads: t, expand: e, state: v });
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<RowFile> = [&self.depth, &self.channels, &self.embed_dim, &self.heads, &self.expand, &self.state]
            .iter()
            .map(|r| RowFile {
                name: r.name.clone(),
                min: rational_to_f64(r.min),
                max: rational_to_f64(r.max),
                interval: rational_to_f64(r.interval),
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("space spec serialization")
    }

    pub fn from_json(s: &str) -> Result<Self, SpaceError> {
        let rows: Vec<RowFile> =
            serde_json::from_str(s).map_err(|e| SpaceError::Io(format!("bad space file: {e}")))?;
        let find = |name: &str| -> Result<GridRow, SpaceError> {
            rows.iter()
                .find(|r| r.name == name)
                .map(|r| GridRow::new(&r.name, r.min, r.max, r.interval))
                .ok_or_else(|| SpaceError::BadRow {
                    name: name.to_string(),
                    msg: "missing row".into(),
                })
        };
        let spec = SpaceSpec {
            depth: find("depth")?,
            channels: find("channels")?,
            embed_dim: find("embed_dim")?,
            heads: find("heads")?,
            expand: find("expand")?,
            state: find("state")?,
        };
        spec.validate_rows()?;
        Ok(spec)
    }
}

/// Per-block local genes (T, E, V).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LocalGenes {
    pub heads: usize,
    pub expand: Rational64,
    pub state: usize,
}

impl fmt::Display for LocalGenes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.heads, rational_to_f64(self.expand), self.state)
    }
}

/// One point of the search space: the global triple (N, C, D) plus N local
/// triples (T, E, V).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArchConfig {
    pub depth: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub locals: Vec<LocalGenes>,
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N={} C={} D={} L=", self.depth, self.channels, self.embed_dim)?;
        for (i, l) in self.locals.iter().enumerate() {
            if i > 0 {
                write!(f, ";")?;
            }
            write!(f, "{}:{}:{}", l.heads, rational_to_f64(l.expand), l.state)?;
        }
        Ok(())
    }
}

/// Which gene group an operator acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Global,
    Local,
}

impl ArchConfig {
    pub fn global(&self) -> (usize, usize, usize) {
        (self.depth, self.channels, self.embed_dim)
    }
}

/// Membership test against the grid. Checks Table ranges and the
/// locals-length invariant.
pub fn validate(spec: &SpaceSpec, cfg: &ArchConfig) -> Result<(), SpaceError> {
    let on = |row: &GridRow, v: Rational64| -> Result<(), SpaceError> {
        if row.values().contains(&v) {
            Ok(())
        } else {
            Err(SpaceError::OffGrid {
                name: row.name.clone(),
                value: v.to_string(),
            })
        }
    };
    on(&spec.depth, Rational64::from_integer(cfg.depth as i64))?;
    on(&spec.channels, Rational64::from_integer(cfg.channels as i64))?;
    on(&spec.embed_dim, Rational64::from_integer(cfg.embed_dim as i64))?;
    if cfg.locals.len() != cfg.depth {
        return Err(SpaceError::LocalLen {
            expected: cfg.depth,
            got: cfg.locals.len(),
        });
    }
    for l in &cfg.locals {
        on(&spec.heads, Rational64::from_integer(l.heads as i64))?;
        on(&spec.expand, l.expand)?;
        on(&spec.state, Rational64::from_integer(l.state as i64))?;
    }
    Ok(())
}

fn pick<T: Copy>(vals: &[T], rng: &mut impl Rng) -> T {
    vals[rng.random_range(0..vals.len())]
}

pub fn sample_local(spec: &SpaceSpec, rng: &mut impl Rng) -> LocalGenes {
    LocalGenes {
        heads: pick(&spec.head_values(), rng),
        expand: pick(&spec.expand_values(), rng),
        state: pick(&spec.state_values(), rng),
    }
}

/// Adjust a locals list to a new depth: truncate, or extend with fresh
/// uniform samples.
pub fn fit_locals(
    spec: &SpaceSpec,
    locals: &[LocalGenes],
    depth: usize,
    rng: &mut impl Rng,
) -> Vec<LocalGenes> {
    let mut out: Vec<LocalGenes> = locals.iter().copied().take(depth).collect();
    while out.len() < depth {
        out.push(sample_local(spec, rng));
    }
    out
}

/// Uniform sampling over the non-fixed part of the space. When the global
/// triple is fixed, only the locals are drawn; when the locals are fixed,
/// the list is truncated/extended to the sampled depth.
pub fn sample_config(
    spec: &SpaceSpec,
    rng: &mut impl Rng,
    fixed_global: Option<(usize, usize, usize)>,
    fixed_locals: Option<&[LocalGenes]>,
) -> ArchConfig {
    let (depth, channels, embed_dim) = match fixed_global {
        Some(g) => g,
        None => (
            pick(&spec.depths(), rng),
            pick(&spec.channel_values(), rng),
            pick(&spec.embed_values(), rng),
        ),
    };
    let locals = match fixed_locals {
        Some(ls) => fit_locals(spec, ls, depth, rng),
        None => (0..depth).map(|_| sample_local(spec, rng)).collect(),
    };
    ArchConfig {
        depth,
        channels,
        embed_dim,
        locals,
    }
}

/// Each gene of the active stage is independently resampled with probability
/// `rate` (uniformly over its full candidate set, so it may come back
/// unchanged). A depth change truncates or extends the locals with fresh
/// uniform samples.
pub fn mutate(
    spec: &SpaceSpec,
    cfg: &ArchConfig,
    rate: f64,
    stage: Stage,
    rng: &mut impl Rng,
) -> ArchConfig {
    let mut out = cfg.clone();
    match stage {
        Stage::Global => {
            if rng.random::<f64>() < rate {
                out.depth = pick(&spec.depths(), rng);
            }
            if rng.random::<f64>() < rate {
                out.channels = pick(&spec.channel_values(), rng);
            }
            if rng.random::<f64>() < rate {
                out.embed_dim = pick(&spec.embed_values(), rng);
            }
            if out.depth != cfg.depth {
                out.locals = fit_locals(spec, &cfg.locals, out.depth, rng);
            }
        }
        Stage::Local => {
            for l in out.locals.iter_mut() {
                if rng.random::<f64>() < rate {
                    l.heads = pick(&spec.head_values(), rng);
                }
                if rng.random::<f64>() < rate {
                    l.expand = pick(&spec.expand_values(), rng);
                }
                if rng.random::<f64>() < rate {
                    l.state = pick(&spec.state_values(), rng);
                }
            }
        }
    }
    out
}

/// Per-gene uniform pick from the two parents. In the global stage the
/// child's locals follow whichever parent supplied the depth gene. In the
/// local stage both parents must share a depth; otherwise this falls back to
/// a mutation of `a`.
pub fn crossover(
    spec: &SpaceSpec,
    a: &ArchConfig,
    b: &ArchConfig,
    stage: Stage,
    rng: &mut impl Rng,
) -> ArchConfig {
    match stage {
        Stage::Global => {
            let from_a = rng.random::<bool>();
            let depth = if from_a { a.depth } else { b.depth };
            let channels = if rng.random::<bool>() { a.channels } else { b.channels };
            let embed_dim = if rng.random::<bool>() { a.embed_dim } else { b.embed_dim };
            let donor = if from_a { a } else { b };
            let locals = fit_locals(spec, &donor.locals, depth, rng);
            ArchConfig {
                depth,
                channels,
                embed_dim,
                locals,
            }
        }
        Stage::Local => {
            if a.depth != b.depth {
                return mutate(spec, a, 0.2, Stage::Local, rng);
            }
            let mut locals = Vec::with_capacity(a.depth);
            for (la, lb) in a.locals.iter().zip(&b.locals) {
                locals.push(LocalGenes {
                    heads: if rng.random::<bool>() { la.heads } else { lb.heads },
                    expand: if rng.random::<bool>() { la.expand } else { lb.expand },
                    state: if rng.random::<bool>() { la.state } else { lb.state },
                });
            }
            ArchConfig {
                depth: a.depth,
                channels: a.channels,
                embed_dim: a.embed_dim,
                locals,
            }
        }
    }
}
