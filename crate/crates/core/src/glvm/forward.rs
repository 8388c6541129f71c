//! Forward pass of the full network: stem, patch embedding, the stacked
//! ConvMamba blocks with their feature interaction units, and the two
//! classifier heads. Loss averaging and score-fusion prediction live here
//! too.
//!
//! Batch norm layers never mutate their running statistics during a forward;
//! in train mode the observed batch statistics are pushed into a `BnUpdates`
//! sink keyed by entry index, and the trainer folds them in after the step.

use std::cell::RefCell;

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::mhmamba::{merge_directions, scan_order, Direction};
use crate::ops::loss::Target;
use crate::ops::norm::BnMode;
use crate::ssm::selective_scan;
use crate::tensor::{Graph, Tensor};

use super::config::{block_dims, Mode};
use super::weights::GlvmWeights;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
pub const RMS_EPS: f64 = 1e-6;

/// Batch statistics observed by train-mode batch norm layers, keyed by the
/// entry indices of the (mean, var) buffers they belong to.
#[derive(Default)]
pub struct BnUpdates<E> {
    updates: RefCell<Vec<(usize, usize, Vec<E>, Vec<E>)>>,
}

impl<E: Elem> BnUpdates<E> {
    pub fn new() -> Self {
        BnUpdates {
            updates: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, mean_idx: usize, var_idx: usize, mean: Vec<E>, var: Vec<E>) {
        self.updates.borrow_mut().push((mean_idx, var_idx, mean, var));
    }

    pub fn take(&self) -> Vec<(usize, usize, Vec<E>, Vec<E>)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Fold the collected statistics into the running buffers with the
    /// standard exponential moving average.
    pub fn apply_ema(&self, w: &GlvmWeights<E>, momentum: f64) {
        let m = E::from_f64(momentum);
        let keep = E::from_f64(1.0 - momentum);
        for (mi, vi, mean, var) in self.take() {
            w.tensor_at(mi).update_data(|d| {
                for (r, &b) in d.iter_mut().zip(&mean) {
                    *r = *r * keep + b * m;
                }
            });
            w.tensor_at(vi).update_data(|d| {
                for (r, &b) in d.iter_mut().zip(&var) {
                    *r = *r * keep + b * m;
                }
            });
        }
    }

    /// Overwrite the running buffers with the collected statistics
    /// (calibration before subnet evaluation).
    pub fn apply_set(&self, w: &GlvmWeights<E>) {
        for (mi, vi, mean, var) in self.take() {
            w.tensor_at(mi).set_data(mean);
            w.tensor_at(vi).set_data(var);
        }
    }
}

/// Forward phase: eval uses running statistics, train uses batch statistics
/// and reports them to the sink.
pub enum Phase<'a, E: Elem> {
    Eval,
    Train(&'a BnUpdates<E>),
}

impl<'a, E: Elem> Phase<'a, E> {
    fn bn_mode(&self) -> BnMode {
        match self {
            Phase::Eval => BnMode::Eval,
            Phase::Train(_) => BnMode::Train,
        }
    }
}

/// conv + bias + batch norm + ReLU, the repeating unit of the CNN branch.
fn conv_bn_relu<E: Elem>(
    g: &Graph<E>,
    w: &GlvmWeights<E>,
    prefix: &str,
    x: &Tensor<E>,
    stride: usize,
    pad: usize,
    groups: usize,
    phase: &Phase<E>,
) -> Result<Tensor<E>> {
    let conv = g.conv2d(x, w.t(&format!("{prefix}.conv.w")), stride, pad, groups)?;
    let conv = g.bias_channel(&conv, w.t(&format!("{prefix}.conv.b")))?;
    let (y, stats) = g.batchnorm2d(
        &conv,
        w.t(&format!("{prefix}.bn.g")),
        w.t(&format!("{prefix}.bn.b")),
        w.t(&format!("{prefix}.bn.mean")),
        w.t(&format!("{prefix}.bn.var")),
        BN_EPS,
        phase.bn_mode(),
    )?;
    if let (Phase::Train(sink), Some(s)) = (phase, stats) {
        sink.push(
            w.idx(&format!("{prefix}.bn.mean")),
            w.idx(&format!("{prefix}.bn.var")),
            s.mean,
            s.var,
        );
    }
    g.relu(&y)
}

/// Stem: 7x7/s2 conv, BN, ReLU, 3x3/s2 max pool; [B,C0,H,W] -> [B,C,H/4,W/4].
pub fn stem<E: Elem>(
    g: &Graph<E>,
    w: &GlvmWeights<E>,
    x: &Tensor<E>,
    phase: &Phase<E>,
) -> Result<Tensor<E>> {
    let (h, ww) = match x.shape() {
        [_, c0, h, w_] if *c0 == w.cfg.in_channels => (*h, *w_),
        other => {
            return Err(TensorError::param(
                "stem",
                format!(
                    "input must be [B, {}, H, W], got {other:?}",
                    w.cfg.in_channels
                ),
            ))
        }
    };
    if h % 4 != 0 || ww % 4 != 0 {
        return Err(TensorError::param(
            "stem",
            format!("input size {h}x{ww} not divisible by 4"),
        ));
    }
    let y = conv_bn_relu(g, w, "stem", x, 2, 3, 1, phase)?;
    g.maxpool2d(&y, 3, 2, 1)
}

/// Patch embedding: pxp/sp conv then flatten + transpose; [B,C,G,G] ->
/// [B, L, D] with L = (G/p)^2.
pub fn patch_embed<E: Elem>(g: &Graph<E>, w: &GlvmWeights<E>, fc: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, gh, gw) = match fc.shape() {
        [b, c, gh, gw] if *c == w.cfg.channels => (*b, *gh, *gw),
        other => {
            return Err(TensorError::param(
                "patch_embed",
                format!("expected [B, {}, G, G], got {other:?}", w.cfg.channels),
            ))
        }
    };
    let p = w.cfg.patch;
    if gh % p != 0 || gw % p != 0 {
        return Err(TensorError::param(
            "patch_embed",
            format!("grid {gh}x{gw} not divisible by patch size {p}"),
        ));
    }
    let emb = g.conv2d(fc, w.t("patch.conv.w"), p, 0, 1)?;
    let emb = g.bias_channel(&emb, w.t("patch.conv.b"))?;
    let l = (gh / p) * (gw / p);
    let flat = g.reshape(&emb, vec![b, w.cfg.embed_dim, l])?;
    g.transpose_12(&flat)
}

/// First interaction unit: CNN features -> token embeddings.
/// 1x1 conv to D channels, adaptive average pool to the token grid, flatten
/// and transpose, layer norm, GeLU.
pub fn fiu1<E: Elem>(
    g: &Graph<E>,
    w: &GlvmWeights<E>,
    block: usize,
    ft: &Tensor<E>,
    grid: (usize, usize),
) -> Result<Tensor<E>> {
    let b = ft.shape()[0];
    let l = grid.0 * grid.1;
    if grid.0 != grid.1 {
        return Err(TensorError::param(
            "fiu1",
            format!("token count {l} is not a perfect square grid ({}x{})", grid.0, grid.1),
        ));
    }
    let p = format!("block{block:02}.fiu1");
    let y = g.conv2d(ft, w.t(&format!("{p}.conv.w")), 1, 0, 1)?;
    let y = g.bias_channel(&y, w.t(&format!("{p}.conv.b")))?;
    let y = g.adaptive_avg_pool2d(&y, grid.0, grid.1)?;
    let y = g.reshape(&y, vec![b, w.cfg.embed_dim, l])?;
    let y = g.transpose_12(&y)?;
    let y = g.layernorm_last(&y, w.t(&format!("{p}.ln.g")), w.t(&format!("{p}.ln.b")), LN_EPS)?;
    g.gelu(&y)
}

/// Second interaction unit: token embeddings -> CNN features.
/// Transpose + reshape to the token grid, 1x1 conv to the branch channels,
/// BN + ReLU, bilinear interpolation to the target spatial size.
pub fn fiu2<E: Elem>(
    g: &Graph<E>,
    w: &GlvmWeights<E>,
    block: usize,
    tokens: &Tensor<E>,
    grid: (usize, usize),
    target: (usize, usize, usize),
    phase: &Phase<E>,
) -> Result<Tensor<E>> {
    let (b, l) = match tokens.shape() {
        [b, l, d] if *d == w.cfg.embed_dim => (*b, *l),
        other => {
            return Err(TensorError::param(
                "fiu2",
                format!("expected [B, L, {}], got {other:?}", w.cfg.embed_dim),
            ))
        }
    };
    if l != grid.0 * grid.1 || grid.0 != grid.1 {
        return Err(TensorError::param(
            "fiu2",
            format!("token count {l} does not form a square {}x{} grid", grid.0, grid.1),
        ));
    }
    let p = format!("block{block:02}.fiu2");
    let y = g.transpose_12(tokens)?;
    let y = g.reshape(&y, vec![b, w.cfg.embed_dim, grid.0, grid.1])?;
    let y = g.conv2d(&y, w.t(&format!("{p}.conv.w")), 1, 0, 1)?;
    let y = g.bias_channel(&y, w.t(&format!("{p}.conv.b")))?;
    let (y, stats) = g.batchnorm2d(
        &y,
        w.t(&format!("{p}.bn.g")),
        w.t(&format!("{p}.bn.b")),
        w.t(&format!("{p}.bn.mean")),
        w.t(&format!("{p}.bn.var")),
        BN_EPS,
        phase.bn_mode(),
    )?;
    if let (Phase::Train(sink), Some(s)) = (phase, stats) {
        sink.push(
            w.idx(&format!("{p}.bn.mean")),
            w.idx(&format!("{p}.bn.var")),
            s.mean,
            s.var,
        );
    }
    let y = g.relu(&y)?;
    if target.0 != y.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "fiu2",
            axis: 1,
            expected: target.0,
            got: y.shape()[1],
        });
    }
    g.resize_bilinear(&y, target.1, target.2)
}

/// The multi-head Mamba sub-block applied to [B, S, D] tokens with the class
/// token (when present) pinned at sequence position 0 in every direction.
fn mh_block<E: Elem>(
    g: &Graph<E>,
    w: &GlvmWeights<E>,
    block: usize,
    x: &Tensor<E>,
    grid: (usize, usize),
) -> Result<Tensor<E>> {
    let (_, s, d) = match x.shape() {
        [b, s, d] => (*b, *s, *d),
        other => {
            return Err(TensorError::param(
                "mh_block",
                format!("expected [B, S, D], got {other:?}"),
            ))
        }
    };
    let l = grid.0 * grid.1;
    let cls_offset = s - l;
    if d != w.cfg.embed_dim || cls_offset > 1 {
        return Err(TensorError::param(
            "mh_block",
            format!("token shape {:?} inconsistent with grid {grid:?}", x.shape()),
        ));
    }
    let p = format!("block{block:02}.mh");
    let heads = w.cfg.block_heads(block);
    let dh = w.cfg.head_dim(block)?;
    let dirs = &Direction::ALL[..w.cfg.dirs()];

    let normed = g.rmsnorm_last(x, w.t(&format!("{p}.rms.g")), RMS_EPS)?;
    let expanded = g.bias_last(
        &g.matmul(&normed, w.t(&format!("{p}.in_proj.w")))?,
        w.t(&format!("{p}.in_proj.b")),
    )?;

    let orders: Vec<Vec<usize>> = dirs
        .iter()
        .map(|&dir| {
            let spatial = scan_order(dir, grid.0, grid.1);
            let mut full: Vec<usize> = (0..cls_offset).collect();
            full.extend(spatial.iter().map(|&i| i + cls_offset));
            full
        })
        .collect();
    let inverses: Vec<Vec<usize>> = orders
        .iter()
        .map(|o| crate::mhmamba::inverse_order(o))
        .collect();

    let mut head_outs = Vec::with_capacity(heads);
    for t in 0..heads {
        let hp = format!("{p}.head{t}");
        let head = g.narrow_last(&expanded, t * dh, dh)?;
        // token-local ops commute with the scan permutations; hoist them
        let u = g.bias_last(&g.matmul(&head, w.t(&format!("{hp}.conv.w")))?, w.t(&format!("{hp}.conv.b")))?;
        let bmat = g.matmul(&u, w.t(&format!("{hp}.w_b")))?;
        let cmat = g.matmul(&u, w.t(&format!("{hp}.w_c")))?;
        let dt = g.softplus(&g.bias_last(
            &g.matmul(&u, w.t(&format!("{hp}.w_dt")))?,
            w.t(&format!("{hp}.b_dt")),
        )?)?;
        let gate = g.silu(&head)?;
        let mut parts: Vec<(Direction, Tensor<E>)> = Vec::with_capacity(dirs.len());
        for (j, &dir) in dirs.iter().enumerate() {
            let y = selective_scan(
                g,
                &g.gather_tokens(&u, &orders[j])?,
                &g.gather_tokens(&dt, &orders[j])?,
                &g.gather_tokens(&bmat, &orders[j])?,
                &g.gather_tokens(&cmat, &orders[j])?,
                w.t(&format!("{hp}.a")),
            )?;
            parts.push((dir, g.gather_tokens(&y, &inverses[j])?));
        }
        let merged = merge_directions(g, &parts)?;
        head_outs.push(g.mul(&merged, &gate)?);
    }
    let refs: Vec<&Tensor<E>> = head_outs.iter().collect();
    let concat = g.concat_last(&refs)?;
    g.bias_last(&g.matmul(&concat, w.t(&format!("{p}.out_proj.w")))?, w.t(&format!("{p}.out_proj.b")))
}

/// One ConvMamba block. `fc` is the CNN feature map at the block's stage
/// dimensions, `fm` the token stream [B, L+1, D]. Returns the next pair.
pub fn convmamba_block<E: Elem>(
    g: &Graph<E>,
    w: &GlvmWeights<E>,
    block: usize,
    fc: &Tensor<E>,
    fm: &Tensor<E>,
    grid: (usize, usize),
    phase: &Phase<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let mode = w.cfg.mode;
    let p = format!("block{block:02}");
    let (cin, _cout, stride) = block_dims(w.cfg.channels, block, w.cfg.depth);
    if mode.has_mamba_head() && !mode.has_cnn_head() {
        // Mamba-only ablations: the CNN branch is not computed at all.
        let fm_next = mh_block(g, w, block, fm, grid)?;
        return Ok((fc.clone(), fm_next));
    }
    if fc.shape()[1] != cin {
        return Err(TensorError::ShapeMismatch {
            op: "convmamba_block",
            axis: 1,
            expected: cin,
            got: fc.shape()[1],
        });
    }

    // first CNN sub-block
    let t1 = conv_bn_relu(g, w, &format!("{p}.cnn.a1"), fc, 1, 0, 1, phase)?;
    let ft = conv_bn_relu(g, w, &format!("{p}.cnn.dwa"), &t1, 1, 1, cin, phase)?;

    // token path
    let fm_next = match mode {
        Mode::CnnOnly => fm.clone(),
        Mode::DualNoFiu => mh_block(g, w, block, fm, grid)?,
        Mode::DualFiu => {
            let fi = fiu1(g, w, block, &ft, grid)?;
            let cls = g.narrow_tokens(fm, 0, 1)?;
            let spatial = g.narrow_tokens(fm, 1, grid.0 * grid.1)?;
            let fused = g.add(&spatial, &fi)?;
            let fm_tilde = g.concat_tokens(&[&cls, &fused])?;
            mh_block(g, w, block, &fm_tilde, grid)?
        }
        Mode::MambaOnly | Mode::SingleHead => unreachable!("handled above"),
    };

    // second CNN sub-block with the residual
    let h1 = conv_bn_relu(g, w, &format!("{p}.cnn.b1"), &ft, 1, 0, 1, phase)?;
    let res = g.add(&h1, fc)?;
    let fhat = conv_bn_relu(g, w, &format!("{p}.cnn.b2"), &res, 1, 0, 1, phase)?;

    let fused = match mode {
        Mode::DualFiu => {
            let spatial = g.narrow_tokens(&fm_next, 1, grid.0 * grid.1)?;
            let target = (fhat.shape()[1], fhat.shape()[2], fhat.shape()[3]);
            let fi2 = fiu2(g, w, block, &spatial, grid, target, phase)?;
            g.add(&fhat, &fi2)?
        }
        _ => fhat,
    };
    let dw = conv_bn_relu(g, w, &format!("{p}.cnn.dwc"), &fused, stride, 1, cin, phase)?;
    let fc_next = conv_bn_relu(g, w, &format!("{p}.cnn.c"), &dw, 1, 0, 1, phase)?;
    Ok((fc_next, fm_next))
}

/// Logit pair; branches not built by the mode are absent.
pub struct Logits<E: Elem> {
    pub cnn: Option<Tensor<E>>,
    pub mamba: Option<Tensor<E>>,
}

/// Full forward pass over a [B, C0, H, W] batch.
pub fn glvm_forward<E: Elem>(
    g: &Graph<E>,
    w: &GlvmWeights<E>,
    x: &Tensor<E>,
    phase: &Phase<E>,
) -> Result<Logits<E>> {
    let b = x.shape()[0];
    let fc = stem(g, w, x, phase)?;
    let (gh, gw) = (fc.shape()[2] / w.cfg.patch, fc.shape()[3] / w.cfg.patch);
    let tokens = patch_embed(g, w, &fc)?;
    let cls = g.broadcast_token(w.t("cls_token"), b)?;
    let mut fm = g.concat_tokens(&[&cls, &tokens])?;
    let mut fc = fc;
    for i in 0..w.cfg.depth {
        let (next_fc, next_fm) = convmamba_block(g, w, i, &fc, &fm, (gh, gw), phase)?;
        fc = next_fc;
        fm = next_fm;
    }
    let cnn = if w.cfg.mode.has_cnn_head() {
        let pooled = g.global_max_pool(&fc)?;
        Some(g.bias_last(&g.matmul(&pooled, w.t("head_cnn.w"))?, w.t("head_cnn.b"))?)
    } else {
        None
    };
    let mamba = if w.cfg.mode.has_mamba_head() {
        let clsf = g.narrow_tokens(&fm, 0, 1)?;
        let clsf = g.reshape(&clsf, vec![b, w.cfg.embed_dim])?;
        Some(g.bias_last(&g.matmul(&clsf, w.t("head_mamba.w"))?, w.t("head_mamba.b"))?)
    } else {
        None
    };
    Ok(Logits { cnn, mamba })
}

/// Training loss: the mean of the two classifier cross-entropies in dual
/// modes, the single branch's cross-entropy otherwise.
pub fn glvm_loss<E: Elem>(g: &Graph<E>, logits: &Logits<E>, targets: &[Target]) -> Result<Tensor<E>> {
    match (&logits.cnn, &logits.mamba) {
        (Some(c), Some(m)) => {
            let lc = g.cross_entropy(c, targets)?;
            let lm = g.cross_entropy(m, targets)?;
            g.scale(&g.add(&lc, &lm)?, 0.5)
        }
        (Some(c), None) => g.cross_entropy(c, targets),
        (None, Some(m)) => g.cross_entropy(m, targets),
        (None, None) => Err(TensorError::param("glvm_loss", "no classifier logits")),
    }
}

fn softmax_rows<E: Elem>(t: &Tensor<E>) -> (usize, usize, Vec<f64>) {
    let (b, k) = (t.shape()[0], t.shape()[1]);
    let data = t.data_rc();
    let mut out = vec![0.0f64; b * k];
    for r in 0..b {
        let row = &data[r * k..(r + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.to_f64()));
        let mut s = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v.to_f64() - m).exp();
            out[r * k + j] = e;
            s += e;
        }
        for j in 0..k {
            out[r * k + j] /= s;
        }
    }
    (b, k, out)
}

/// Fused class scores: the sum of the branch softmax distributions (a single
/// branch contributes alone in ablation modes). Row-major [B, K].
pub fn fused_scores<E: Elem>(logits: &Logits<E>) -> Result<(usize, usize, Vec<f64>)> {
    match (&logits.cnn, &logits.mamba) {
        (Some(c), Some(m)) => {
            let (b, k, mut sc) = softmax_rows(c);
            let (_, _, sm) = softmax_rows(m);
            for (a, &v) in sc.iter_mut().zip(&sm) {
                *a += v;
            }
            Ok((b, k, sc))
        }
        (Some(c), None) => Ok(softmax_rows(c)),
        (None, Some(m)) => Ok(softmax_rows(m)),
        (None, None) => Err(TensorError::param("glvm_predict", "no classifier logits")),
    }
}

/// Predicted class per sample: argmax of the summed prediction scores, ties
/// broken toward the lowest class index.
pub fn glvm_predict<E: Elem>(logits: &Logits<E>) -> Result<Vec<usize>> {
    let (b, k, scores) = fused_scores(logits)?;
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let row = &scores[r * k..(r + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}
