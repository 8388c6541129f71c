//! Verification metrics: genuine/impostor score pairing and the EER/ROC
//! sweep. The equal error rate is the crossing of FAR(t) = P(impostor >= t)
//! and FRR(t) = P(genuine < t) over the union of observed scores, linearly
//! interpolated between adjacent thresholds when no exact crossing exists.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

#[derive(Debug, Clone)]
pub struct EerRoc {
    pub eer: f64,
    pub threshold_at_eer: f64,
    /// Emitted in descending-threshold order: FAR weakly increasing from
    /// (0, .) at +inf to (1, 1) at -inf.
    pub roc: Vec<RocPoint>,
}

/// Default cap on impostor pairs; beyond it a seeded subsample is taken.
pub const IMPOSTOR_CAP: usize = 100_000;

/// Pair scored probes into genuine/impostor lists. `scores[i]` holds the
/// probe's true class and its per-class fused scores over `classes` entries;
/// `gallery` lists the enrolled class ids a probe may claim.
pub fn score_pairs_from_scores(
    scores: &[(usize, Vec<f64>)],
    gallery: &[usize],
    cap: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
    if gallery.is_empty() {
        return Err(HarnessError::EmptyGallery);
    }
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (true_class, row) in scores {
        for &claimed in gallery {
            if claimed >= row.len() {
                return Err(HarnessError::BadSpec(format!(
                    "gallery class {claimed} outside the score vector ({})",
                    row.len()
                )));
            }
            if claimed == *true_class {
                genuine.push(row[claimed]);
            } else {
                impostor.push(row[claimed]);
            }
        }
    }
    if impostor.len() > cap {
        // seeded reservoir-free subsample: shuffle indices, take the prefix
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..impostor.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        impostor = idx[..cap].iter().map(|&i| impostor[i]).collect();
    }
    Ok((genuine, impostor))
}

fn count_ge(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < t)
}

fn count_lt(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&v| v < t)
}

/// Threshold sweep over the union of scores, plus the two infinite
/// endpoints.
pub fn compute_eer_roc(genuine: &[f64], impostor: &[f64]) -> Result<EerRoc, HarnessError> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(HarnessError::EmptyScores);
    }
    let mut gen_sorted = genuine.to_vec();
    let mut imp_sorted = impostor.to_vec();
    gen_sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    imp_sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));

    let mut thresholds = vec![f64::NEG_INFINITY];
    let mut union: Vec<f64> = gen_sorted.iter().chain(imp_sorted.iter()).cloned().collect();
    union.sort_by(|a, b| a.partial_cmp(b).unwrap());
    union.dedup();
    thresholds.extend(union);
    thresholds.push(f64::INFINITY);

    let n_gen = gen_sorted.len() as f64;
    let n_imp = imp_sorted.len() as f64;
    let fars: Vec<f64> = thresholds
        .iter()
        .map(|&t| count_ge(&imp_sorted, t) as f64 / n_imp)
        .collect();
    let frrs: Vec<f64> = thresholds
        .iter()
        .map(|&t| count_lt(&gen_sorted, t) as f64 / n_gen)
        .collect();

    // first index where FRR >= FAR; exists because FRR(+inf)=1 >= FAR=0
    let i = (0..thresholds.len())
        .find(|&i| frrs[i] >= fars[i])
        .expect("crossing always exists");
    let (eer, threshold_at_eer) = if (frrs[i] - fars[i]).abs() == 0.0 {
        (frrs[i], thresholds[i])
    } else if i == 0 {
        (frrs[0].max(fars[0]), thresholds[0])
    } else {
        // linear interpolation between thresholds i-1 and i
        let d0 = fars[i - 1] - frrs[i - 1]; // > 0
        let d1 = frrs[i] - fars[i]; // >= 0
        let alpha = d0 / (d0 + d1);
        let eer = frrs[i - 1] + alpha * (frrs[i] - frrs[i - 1]);
        let t = if thresholds[i - 1].is_finite() && thresholds[i].is_finite() {
            thresholds[i - 1] + alpha * (thresholds[i] - thresholds[i - 1])
        } else if thresholds[i - 1].is_finite() {
            thresholds[i - 1]
        } else {
            thresholds[i]
        };
        (eer, t)
    };

    let roc: Vec<RocPoint> = (0..thresholds.len())
        .rev()
        .map(|i| RocPoint {
            threshold: thresholds[i],
            far: fars[i],
            tar: 1.0 - frrs[i],
        })
        .collect();
    Ok(EerRoc {
        eer,
        threshold_at_eer,
        roc,
    })
}

/// Metrics CSV with the columns (split, acc, eer, n_genuine, n_impostor).
pub fn write_metrics_csv(
    path: &Path,
    rows: &[(String, f64, f64, usize, usize)],
) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "split,acc,eer,n_genuine,n_impostor")?;
    for (split, acc, eer, ng, ni) in rows {
        writeln!(f, "{split},{acc},{eer},{ng},{ni}")?;
    }
    Ok(())
}

/// ROC CSV with the columns (threshold, far, tar).
pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "threshold,far,tar")?;
    for p in roc {
        writeln!(f, "{},{},{}", p.threshold, p.far, p.tar)?;
    }
    Ok(())
}
