//! Multi-head Mamba block: RMS norm, linear expansion, head split, four
//! fixed 2D scan orders per head, a gated selective SSM per direction, merge
//! and output projection.
//!
//! Per-token ops (the 1x1 projection, the B/C/delta projections, the SiLU
//! gate) commute with token permutations, so they are computed once per head
//! and only the scan itself runs per direction. The direction merge sums in
//! canonical direction order regardless of evaluation order, which makes the
//! merge exactly invariant to permuting its summands.

use num_rational::Rational64;
use rand::Rng;

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::ssm::{selective_scan, SsmParams};
use crate::tensor::{Graph, Tensor};

/// The four scan orders over an h x w token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    /// Row-major (the identity order).
    Horizontal,
    /// Row-major reversed.
    HorizontalFlip,
    /// Column-major.
    Vertical,
    /// Column-major reversed.
    VerticalFlip,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Horizontal,
        Direction::HorizontalFlip,
        Direction::Vertical,
        Direction::VerticalFlip,
    ];

    /// Canonical merge position of this direction.
    pub fn index(self) -> usize {
        match self {
            Direction::Horizontal => 0,
            Direction::HorizontalFlip => 1,
            Direction::Vertical => 2,
            Direction::VerticalFlip => 3,
        }
    }
}

/// Token order of a direction: `order[s]` is the grid index visited at
/// sequence position `s`. Horizontal is the identity; vertical walks column
/// by column; the flipped variants are the reversals.
pub fn scan_order(dir: Direction, h: usize, w: usize) -> Vec<usize> {
    let l = h * w;
    match dir {
        Direction::Horizontal => (0..l).collect(),
        Direction::HorizontalFlip => (0..l).rev().collect(),
        Direction::Vertical => {
            let mut order = Vec::with_capacity(l);
            for col in 0..w {
                for row in 0..h {
                    order.push(row * w + col);
                }
            }
            order
        }
        Direction::VerticalFlip => {
            let mut order = scan_order(Direction::Vertical, h, w);
            order.reverse();
            order
        }
    }
}

/// Inverse permutation: `inv[order[s]] = s`.
pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (s, &i) in order.iter().enumerate() {
        inv[i] = s;
    }
    inv
}

/// Reorder the L tokens of `x` ([L, D] or [B, L, D], L = h*w) along a scan
/// direction.
pub fn multi_scan<E: Elem>(
    g: &Graph<E>,
    x: &Tensor<E>,
    grid: (usize, usize),
    dir: Direction,
) -> Result<Tensor<E>> {
    let l = x.shape()[x.rank() - 2];
    if l != grid.0 * grid.1 {
        return Err(TensorError::ShapeMismatch {
            op: "multi_scan",
            axis: x.rank() - 2,
            expected: grid.0 * grid.1,
            got: l,
        });
    }
    g.gather_tokens(x, &scan_order(dir, grid.0, grid.1))
}

/// Undo `multi_scan` for the same direction and grid.
pub fn inverse_scan<E: Elem>(
    g: &Graph<E>,
    x: &Tensor<E>,
    grid: (usize, usize),
    dir: Direction,
) -> Result<Tensor<E>> {
    let l = x.shape()[x.rank() - 2];
    if l != grid.0 * grid.1 {
        return Err(TensorError::ShapeMismatch {
            op: "inverse_scan",
            axis: x.rank() - 2,
            expected: grid.0 * grid.1,
            got: l,
        });
    }
    g.gather_tokens(x, &inverse_order(&scan_order(dir, grid.0, grid.1)))
}

/// Sum per-direction results in canonical direction order, independent of
/// the order the pairs are supplied in.
pub fn merge_directions<E: Elem>(
    g: &Graph<E>,
    parts: &[(Direction, Tensor<E>)],
) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(TensorError::param("merge_directions", "no direction results"));
    }
    let mut sorted: Vec<&(Direction, Tensor<E>)> = parts.iter().collect();
    sorted.sort_by_key(|(d, _)| d.index());
    for win in sorted.windows(2) {
        if win[0].0 == win[1].0 {
            return Err(TensorError::param(
                "merge_directions",
                format!("duplicate direction {:?}", win[0].0),
            ));
        }
    }
    let mut acc = sorted[0].1.clone();
    for (_, t) in sorted.into_iter().skip(1) {
        acc = g.add(&acc, t)?;
    }
    Ok(acc)
}

/// Shape of one multi-head Mamba block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MhConfig {
    /// Embedding width of the token stream.
    pub embed_dim: usize,
    /// Head count T.
    pub heads: usize,
    /// Expansion ratio E (exact rational; half-integers on the search grid).
    pub expand: Rational64,
    /// SSM state size V.
    pub state: usize,
    /// Number of scan directions (4, or 1 for the single-path ablation).
    pub dirs: usize,
}

impl MhConfig {
    pub fn new(embed_dim: usize, heads: usize, expand: Rational64, state: usize) -> Self {
        MhConfig {
            embed_dim,
            heads,
            expand,
            state,
            dirs: 4,
        }
    }

    /// E*D, when it is an integer.
    pub fn expanded_dim(&self) -> Result<usize> {
        let num = self.expand.numer() * self.embed_dim as i64;
        let den = *self.expand.denom();
        if den == 0 || num % den != 0 || num <= 0 {
            return Err(TensorError::param(
                "mh_config",
                format!("E*D = {}*{} is not a positive integer", self.expand, self.embed_dim),
            ));
        }
        Ok((num / den) as usize)
    }

    /// Per-head width D_h = E*D / T; errors when E*D is not divisible by T.
    pub fn head_dim(&self) -> Result<usize> {
        let ed = self.expanded_dim()?;
        if self.heads == 0 || ed % self.heads != 0 {
            return Err(TensorError::param(
                "mh_config",
                format!("expanded dim {ed} not divisible by head count {}", self.heads),
            ));
        }
        Ok(ed / self.heads)
    }

    pub fn directions(&self) -> &'static [Direction] {
        &Direction::ALL[..self.dirs]
    }
}

/// Weights of one multi-head Mamba block. SSM parameters are independent per
/// head and shared across that head's scan directions.
pub struct MhWeights<E: Elem> {
    pub cfg: MhConfig,
    pub rms_gamma: Tensor<E>,
    pub w_in: Tensor<E>,
    pub b_in: Tensor<E>,
    pub heads: Vec<HeadWeights<E>>,
    pub w_out: Tensor<E>,
    pub b_out: Tensor<E>,
}

pub struct HeadWeights<E: Elem> {
    /// Per-token channel projection (the 1x1 convolution ahead of the SSM).
    pub w_conv: Tensor<E>,
    pub b_conv: Tensor<E>,
    pub ssm: SsmParams<E>,
}

impl<E: Elem> MhWeights<E> {
    pub fn init(cfg: MhConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let ed = cfg.expanded_dim()?;
        let dh = cfg.head_dim()?;
        let mut mat = |rows: usize, cols: usize, fan_in: usize| {
            let k = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<E> = (0..rows * cols)
                .map(|_| E::from_f64(rng.random_range(-k..k)))
                .collect();
            Tensor::param(vec![rows, cols], data)
        };
        let w_in = mat(d, ed, d);
        let b_in = Tensor::param(vec![ed], vec![E::ZERO; ed]);
        let w_out = mat(ed, d, ed);
        let b_out = Tensor::param(vec![d], vec![E::ZERO; d]);
        let mut heads = Vec::with_capacity(cfg.heads);
        for _ in 0..cfg.heads {
            let w_conv = {
                let k = 1.0 / (dh as f64).sqrt();
                let data: Vec<E> = (0..dh * dh)
                    .map(|_| E::from_f64(rng.random_range(-k..k)))
                    .collect();
                Tensor::param(vec![dh, dh], data)
            };
            heads.push(HeadWeights {
                w_conv,
                b_conv: Tensor::param(vec![dh], vec![E::ZERO; dh]),
                ssm: SsmParams::init(dh, cfg.state, rng),
            });
        }
        Ok(MhWeights {
            cfg,
            rms_gamma: Tensor::param(vec![d], vec![E::ONE; d]),
            w_in,
            b_in,
            heads,
            w_out,
            b_out,
        })
    }
}

/// RMS layer norm epsilon used throughout the block.
pub const RMS_EPS: f64 = 1e-6;

/// Forward pass of the block over [B, S, D] tokens, where S = h*w spatial
/// tokens, optionally preceded by one class token that keeps sequence
/// position 0 in every scan direction. Output has the same shape.
pub fn mhmamba_forward<E: Elem>(
    g: &Graph<E>,
    x: &Tensor<E>,
    w: &MhWeights<E>,
    grid: (usize, usize),
) -> Result<Tensor<E>> {
    let (_, s, d) = match x.shape() {
        [b, s, d] => (*b, *s, *d),
        other => {
            return Err(TensorError::param(
                "mhmamba_forward",
                format!("expected [B, S, D], got {other:?}"),
            ))
        }
    };
    if d != w.cfg.embed_dim {
        return Err(TensorError::ShapeMismatch {
            op: "mhmamba_forward",
            axis: 2,
            expected: w.cfg.embed_dim,
            got: d,
        });
    }
    let l = grid.0 * grid.1;
    let cls_offset = if s == l {
        0
    } else if s == l + 1 {
        1
    } else {
        return Err(TensorError::ShapeMismatch {
            op: "mhmamba_forward",
            axis: 1,
            expected: l,
            got: s,
        });
    };
    let dh = w.cfg.head_dim()?;
    let ed = w.cfg.expanded_dim()?;
    debug_assert_eq!(ed, dh * w.cfg.heads);

    let normed = g.rmsnorm_last(x, &w.rms_gamma, RMS_EPS)?;
    let expanded = g.bias_last(&g.matmul(&normed, &w.w_in)?, &w.b_in)?; // [B,S,ED]

    // full-sequence orders with the class token pinned at position 0
    let orders: Vec<Vec<usize>> = w
        .cfg
        .directions()
        .iter()
        .map(|&dir| {
            let spatial = scan_order(dir, grid.0, grid.1);
            let mut full = Vec::with_capacity(s);
            for p in 0..cls_offset {
                full.push(p);
            }
            full.extend(spatial.iter().map(|&i| i + cls_offset));
            full
        })
        .collect();

    let mut head_outs = Vec::with_capacity(w.cfg.heads);
    for (t, hw) in w.heads.iter().enumerate() {
        let head = g.narrow_last(&expanded, t * dh, dh)?; // [B,S,Dh]
        // per-token ops commute with token permutations: compute once
        let u = g.bias_last(&g.matmul(&head, &hw.w_conv)?, &hw.b_conv)?;
        let bmat = g.matmul(&u, &hw.ssm.w_b)?;
        let cmat = g.matmul(&u, &hw.ssm.w_c)?;
        let dt = g.softplus(&g.bias_last(&g.matmul(&u, &hw.ssm.w_dt)?, &hw.ssm.bias_dt)?)?;
        let gate = g.silu(&head)?;

        let mut parts: Vec<(Direction, Tensor<E>)> = Vec::with_capacity(w.cfg.dirs);
        for (j, &dir) in w.cfg.directions().iter().enumerate() {
            let order = &orders[j];
            let inv = inverse_order(order);
            let y = selective_scan(
                g,
                &g.gather_tokens(&u, order)?,
                &g.gather_tokens(&dt, order)?,
                &g.gather_tokens(&bmat, order)?,
                &g.gather_tokens(&cmat, order)?,
                &hw.ssm.a,
            )?;
            parts.push((dir, g.gather_tokens(&y, &inv)?));
        }
        let merged = merge_directions(g, &parts)?;
        head_outs.push(g.mul(&merged, &gate)?);
    }
    let refs: Vec<&Tensor<E>> = head_outs.iter().collect();
    let concat = g.concat_last(&refs)?; // [B,S,ED]
    g.bias_last(&g.matmul(&concat, &w.w_out)?, &w.b_out)
}
