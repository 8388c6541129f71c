//! Supernet training and subnet evaluation. Each training step samples one
//! uniform random subnet of the active stage, runs a minibatch through it,
//! and applies the optimizer to the sliced weights only, writing weights,
//! batch-norm statistics and Adam moments back into the banks.

use glvm_core::glvm::{glvm_forward, glvm_loss, BnUpdates, Phase, BN_MOMENTUM};
use glvm_core::ops::Target;
use glvm_core::space::{ArchConfig, LocalGenes, SpaceSpec, Stage};
use glvm_core::{Graph, Tensor};
use glvm_harness::data::{Sample, VeinDataset};
use glvm_harness::optim::AdamW;
use glvm_harness::train::evaluate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::supernet::{buildable_locals, default_local, Supernet};
use crate::SearchError;

/// Fit a fixed locals list to a depth, extending deterministically with the
/// default triple (the staging contract: fixed parts stay fixed).
pub fn fit_fixed_locals(fixed: &[LocalGenes], depth: usize) -> Vec<LocalGenes> {
    let mut out: Vec<LocalGenes> = fixed.iter().copied().take(depth).collect();
    while out.len() < depth {
        out.push(default_local());
    }
    out
}

fn locals_buildable(locals: &[LocalGenes], d: usize) -> bool {
    locals.iter().all(|l| {
        let num = l.expand.numer() * d as i64;
        let den = *l.expand.denom();
        num > 0 && num % den == 0 && (num / den) % l.heads as i64 == 0
    })
}

/// Uniform random subnet of the active stage. The complementary part stays
/// fixed: the global stage varies (N, C, D) with the fixed locals fit to the
/// sampled depth (rejecting globals the fixed locals cannot build at); the
/// local stage varies per-block (T, E, V) over the head-divisible combos.
pub fn sample_stage_config(
    space: &SpaceSpec,
    stage: Stage,
    fixed: &ArchConfig,
    rng: &mut ChaCha8Rng,
) -> ArchConfig {
    match stage {
        Stage::Global => loop {
            let depth = pick(&space.depths(), rng);
            let channels = pick(&space.channel_values(), rng);
            let embed_dim = pick(&space.embed_values(), rng);
            let locals = fit_fixed_locals(&fixed.locals, depth);
            if locals_buildable(&locals, embed_dim) {
                return ArchConfig {
                    depth,
                    channels,
                    embed_dim,
                    locals,
                };
            }
        },
        Stage::Local => {
            let combos = buildable_locals(space, fixed.embed_dim);
            let locals = (0..fixed.depth).map(|_| pick(&combos, rng)).collect();
            ArchConfig {
                depth: fixed.depth,
                channels: fixed.channels,
                embed_dim: fixed.embed_dim,
                locals,
            }
        }
    }
}

fn pick<T: Copy>(vals: &[T], rng: &mut ChaCha8Rng) -> T {
    vals[rng.random_range(0..vals.len())]
}

#[derive(Debug, Clone)]
pub struct SupernetTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SupernetTrainOptions {
    fn default() -> Self {
        SupernetTrainOptions {
            epochs: 2,
            batch: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

fn batch_tensor(samples: &[&Sample], h: usize, w: usize) -> (Tensor<f32>, Vec<Target>) {
    let mut flat = Vec::with_capacity(samples.len() * h * w);
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        flat.extend_from_slice(&s.pixels);
        targets.push(Target::Hard(s.class));
    }
    (Tensor::from_vec(vec![samples.len(), 1, h, w], flat), targets)
}

/// One supernet training step on an explicit subnet. Exposed so the
/// entanglement tests can drive steps with chosen configs.
pub fn train_step(
    sn: &mut Supernet,
    arch: &ArchConfig,
    samples: &[&Sample],
    h: usize,
    w: usize,
    lr: f64,
    weight_decay: f64,
) -> Result<f64, SearchError> {
    let weights = sn.entangled_slice(arch)?;
    let (ms, vs) = sn.slice_moments(&weights);
    let mut opt = AdamW::from_state(ms, vs, sn.step, weight_decay);

    let (x, targets) = batch_tensor(samples, h, w);
    let sink = BnUpdates::new();
    let g = Graph::new();
    let logits = glvm_forward(&g, &weights, &x, &Phase::Train(&sink)).map_err(SearchError::Core)?;
    let loss = glvm_loss(&g, &logits, &targets).map_err(SearchError::Core)?;
    let loss_v = loss.item() as f64;
    if !loss_v.is_finite() {
        return Err(SearchError::NonFinite {
            step: sn.step,
            config: arch.to_string(),
        });
    }
    g.backward(&loss).map_err(SearchError::Core)?;
    let params: Vec<&Tensor<f32>> = weights.params().map(|(_, t)| t).collect();
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|t| t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    opt.step(&params, &grads, lr);
    sink.apply_ema(&weights, BN_MOMENTUM);

    let (ms, vs, t) = opt.into_state();
    sn.write_back(&weights)?;
    sn.write_back_moments(&weights, &ms, &vs);
    sn.step = t;
    Ok(loss_v)
}

/// Train the supernet for the given stage: every step draws a fresh uniform
/// subnet of the stage and a fresh shuffled minibatch.
pub fn train_supernet(
    sn: &mut Supernet,
    stage: Stage,
    fixed: &ArchConfig,
    data: &VeinDataset,
    opts: &SupernetTrainOptions,
) -> Result<Vec<f64>, SearchError> {
    let (h, w) = (data.spec.height, data.spec.width);
    let space = sn.space.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::new();
    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(opts.batch.max(1)) {
            let arch = sample_stage_config(&space, stage, fixed, &mut rng);
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let loss = train_step(sn, &arch, &samples, h, w, opts.lr, opts.weight_decay)?;
            losses.push(loss);
        }
    }
    Ok(losses)
}

/// Top-1 accuracy of a subnet with inherited weights, after recalibrating
/// its batch-norm statistics on a held-out calibration batch from the
/// training split. Deterministic for fixed weights and data.
pub fn evaluate_subnet(
    sn: &Supernet,
    arch: &ArchConfig,
    data: &VeinDataset,
    calib: usize,
    batch: usize,
) -> Result<f64, SearchError> {
    if data.val.is_empty() {
        return Err(SearchError::EmptyVal);
    }
    let weights = sn.entangled_slice(arch)?;
    // calibration: one train-mode pass, running stats set to batch stats
    let ncal = calib.min(data.train.len()).max(1);
    let refs: Vec<&Sample> = data.train[..ncal].iter().collect();
    let (x, _) = batch_tensor(&refs, data.spec.height, data.spec.width);
    let sink = BnUpdates::new();
    let g = Graph::inference();
    let _ = glvm_forward(&g, &weights, &x, &Phase::Train(&sink)).map_err(SearchError::Core)?;
    sink.apply_set(&weights);
    let out = evaluate(&weights, &data.val, data.spec.height, data.spec.width, batch)
        .map_err(|e| SearchError::Harness(e.to_string()))?;
    Ok(out.acc)
}
