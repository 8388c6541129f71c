//! The training loop: shuffled minibatches, augmentation and mixup, AdamW
//! with the warmup-cosine schedule, per-epoch validation, best-checkpoint
//! tracking, and a non-finite-loss abort that restores the last good
//! weights.

use glvm_core::glvm::{
    fused_scores, glvm_forward, glvm_loss, glvm_predict, BnUpdates, GlvmWeights, Phase,
    BN_MOMENTUM,
};
use glvm_core::ops::Target;
use glvm_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_image, mixup_batch, AugmentPolicy};
use crate::data::{Sample, VeinDataset};
use crate::optim::{AdamW, Schedule};
use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: Option<AugmentPolicy>,
    pub mixup_alpha: Option<f64>,
    /// Also measure eval-mode accuracy on the training split each epoch.
    pub track_train_acc: bool,
    /// Stop once train accuracy and val accuracy both reach the bound.
    pub stop_at: Option<(f64, f64)>,
    /// Print one line per epoch.
    pub verbose: bool,
}

impl TrainOptions {
    pub fn desk_default(epochs: usize, seed: u64) -> Self {
        TrainOptions {
            epochs,
            batch: 32,
            schedule: Schedule::standard(epochs),
            weight_decay: 0.05,
            seed,
            augment: Some(AugmentPolicy::light()),
            mixup_alpha: None,
            track_train_acc: false,
            stop_at: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<EpochStats>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Assemble a [B, 1, H, W] tensor from samples, optionally augmenting.
fn make_batch(
    samples: &[&Sample],
    h: usize,
    w: usize,
    policy: Option<&AugmentPolicy>,
    mixup_alpha: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, Vec<Target>) {
    let mut images: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| match policy {
            Some(p) => augment_image(&s.pixels, h, w, p, rng),
            None => s.pixels.clone(),
        })
        .collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let targets = match mixup_alpha {
        Some(alpha) => mixup_batch(&mut images, &labels, alpha, rng),
        None => labels.iter().map(|&l| Target::Hard(l)).collect(),
    };
    let mut flat = Vec::with_capacity(samples.len() * h * w);
    for img in &images {
        flat.extend_from_slice(img);
    }
    (
        Tensor::from_vec(vec![samples.len(), 1, h, w], flat),
        targets,
    )
}

/// Eval-mode predictions over a sample list, batched.
pub struct EvalOutputs {
    pub acc: f64,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
    /// Per-sample fused class scores (softmax sums).
    pub scores: Vec<Vec<f64>>,
}

pub fn evaluate(
    w: &GlvmWeights<f32>,
    samples: &[Sample],
    h: usize,
    width: usize,
    batch: usize,
) -> Result<EvalOutputs, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::EmptyScores);
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, _) = make_batch(&refs, h, width, None, None, &mut rng);
        let g = Graph::inference();
        let logits = glvm_forward(&g, w, &x, &Phase::Eval)?;
        let p = glvm_predict(&logits)?;
        let (b, k, s) = fused_scores(&logits)?;
        for (i, sample) in chunk.iter().enumerate() {
            preds.push(p[i]);
            labels.push(sample.class);
            scores.push(s[i * k..(i + 1) * k].to_vec());
        }
        debug_assert_eq!(b, chunk.len());
    }
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(EvalOutputs {
        acc: correct as f64 / samples.len() as f64,
        preds,
        labels,
        scores,
    })
}

/// Train in place. On success the weights hold the best-validation
/// checkpoint. A non-finite loss aborts with the last good checkpoint
/// restored and the partial log attached.
pub fn train(
    w: &GlvmWeights<f32>,
    data: &VeinDataset,
    opts: &TrainOptions,
) -> Result<TrainReport, HarnessError> {
    if data.train.is_empty() {
        return Err(HarnessError::BadSpec("empty training split".into()));
    }
    let (h, width) = (data.spec.height, data.spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let param_sizes: Vec<usize> = w.params().map(|(d, _)| d.numel()).collect();
    let mut opt = AdamW::new(&param_sizes, opts.weight_decay);
    let steps_per_epoch = data.train.len().div_ceil(opts.batch).max(1);

    let mut report = TrainReport::default();
    let mut best_snapshot = w.snapshot();
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(opts.batch).enumerate() {
            let lr = opts
                .schedule
                .lr_at(epoch as f64 + step as f64 / steps_per_epoch as f64);
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (x, targets) = make_batch(
                &samples,
                h,
                width,
                opts.augment.as_ref(),
                opts.mixup_alpha,
                &mut rng,
            );
            let sink = BnUpdates::new();
            let g = Graph::new();
            let logits = glvm_forward(&g, w, &x, &Phase::Train(&sink))?;
            let loss = glvm_loss(&g, &logits, &targets)?;
            let loss_v = loss.item() as f64;
            if !loss_v.is_finite() {
                w.restore(&best_snapshot);
                return Err(HarnessError::NonFinite {
                    epoch,
                    step,
                    detail: format!("loss = {loss_v}"),
                    report: Box::new(report),
                });
            }
            epoch_loss += loss_v * samples.len() as f64;
            g.backward(&loss)?;
            let params: Vec<&Tensor<f32>> = w.params().map(|(_, t)| t).collect();
            let grads: Vec<Vec<f32>> = params
                .iter()
                .map(|t| {
                    let g = t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()]);
                    g
                })
                .collect();
            opt.step(&params, &grads, lr);
            sink.apply_ema(w, BN_MOMENTUM);
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let lr_now = opts.schedule.lr_at(epoch as f64);

        let val_acc = if data.val.is_empty() {
            0.0
        } else {
            evaluate(w, &data.val, h, width, opts.batch)?.acc
        };
        let train_acc = if opts.track_train_acc || opts.stop_at.is_some() {
            Some(evaluate(w, &data.train, h, width, opts.batch)?.acc)
        } else {
            None
        };
        if val_acc > best_val {
            best_val = val_acc;
            best_snapshot = w.snapshot();
            report.best_epoch = epoch;
        }
        if opts.verbose {
            println!(
                "epoch {epoch:3}  lr {lr_now:.5}  loss {train_loss:.4}  val {val_acc:.3}{}",
                train_acc.map(|a| format!("  train {a:.3}")).unwrap_or_default()
            );
        }
        report.log.push(EpochStats {
            epoch,
            lr: lr_now,
            train_loss,
            train_acc,
            val_acc,
        });
        if let (Some((need_train, need_val)), Some(ta)) = (opts.stop_at, train_acc) {
            if ta >= need_train && val_acc >= need_val {
                report.stopped_early = true;
                report.best_val_acc = best_val.max(val_acc);
                // keep the current weights: they satisfy the stop rule
                return Ok(report);
            }
        }
    }
    report.best_val_acc = best_val;
    w.restore(&best_snapshot);
    Ok(report)
}
