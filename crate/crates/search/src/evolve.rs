//! Evolutionary search over one stage: elitist selection, crossover and
//! mutation with buildability repair, deterministic tie-breaking by fewer
//! parameters then lexicographic order, and an all-time-best incumbent.

use std::collections::BTreeMap;

use glvm_core::glvm::param_count;
use glvm_core::space::{crossover, mutate, ArchConfig, SpaceSpec, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::supernet::{buildable_locals, to_glvm, Supernet};
use crate::trainer::{fit_fixed_locals, sample_stage_config};
use crate::SearchError;

/// The read-only facts evolution needs about the search context.
#[derive(Debug, Clone)]
pub struct StageCtx {
    pub space: SpaceSpec,
    pub classes: usize,
    pub patch: usize,
    pub in_channels: usize,
}

impl StageCtx {
    pub fn of(sn: &Supernet) -> Self {
        StageCtx {
            space: sn.space.clone(),
            classes: sn.classes,
            patch: sn.patch,
            in_channels: sn.in_channels,
        }
    }
}

/// Anything that can score a candidate architecture. The production
/// implementation evaluates subnets on the validation split with inherited
/// supernet weights; tests plug in surrogate fitness functions.
pub trait Fitness {
    fn fitness(&mut self, cfg: &ArchConfig) -> Result<f64, SearchError>;
}

impl<F: FnMut(&ArchConfig) -> f64> Fitness for F {
    fn fitness(&mut self, cfg: &ArchConfig) -> Result<f64, SearchError> {
        Ok(self(cfg))
    }
}

#[derive(Debug, Clone)]
pub struct EvolveOptions {
    pub population: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub crossover_prob: f64,
    /// Fraction of the population kept as elites each generation.
    pub elite_frac: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            population: 20,
            generations: 10,
            mutation_rate: 0.2,
            crossover_prob: 0.5,
            elite_frac: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenRecord {
    pub round: usize,
    pub stage: Stage,
    pub gen: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_cfg: ArchConfig,
}

/// Param count used for tie-breaks; unbuildable configs never reach here.
fn params_of(cfg: &ArchConfig, classes: usize, patch: usize, in_ch: usize) -> u64 {
    param_count(&to_glvm(cfg, classes, patch, in_ch)).unwrap_or(u64::MAX)
}

/// Deterministic ranking: fitness desc, then fewer parameters, then
/// lexicographic config order.
fn rank_key(fit: f64, params: u64, cfg: &ArchConfig) -> (std::cmp::Reverse<ordered::NotNanF64>, u64, ArchConfig) {
    (
        std::cmp::Reverse(ordered::NotNanF64::new(fit)),
        params,
        cfg.clone(),
    )
}

mod ordered {
    /// Total order for finite fitness values.
    #[derive(PartialEq, PartialOrd, Clone, Copy, Debug)]
    pub struct NotNanF64(f64);

    impl NotNanF64 {
        pub fn new(v: f64) -> Self {
            assert!(!v.is_nan(), "fitness must not be NaN");
            NotNanF64(v)
        }
    }
    impl Eq for NotNanF64 {}
    #[allow(clippy::derive_ord_xor_partial_ord)]
    impl Ord for NotNanF64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.partial_cmp(other).unwrap()
        }
    }
}

/// Repair a candidate so the active stage stays buildable: in the local
/// stage, offending block triples are resampled from the head-divisible
/// combos; in the global stage, the global triple is resampled against the
/// fixed locals.
fn repair(
    spec: &SpaceSpec,
    stage: Stage,
    fixed: &ArchConfig,
    mut cfg: ArchConfig,
    rng: &mut ChaCha8Rng,
) -> ArchConfig {
    match stage {
        Stage::Global => {
            cfg.locals = fit_fixed_locals(&fixed.locals, cfg.depth);
            let check = |c: &ArchConfig| {
                c.locals.iter().all(|l| {
                    let num = l.expand.numer() * c.embed_dim as i64;
                    let den = *l.expand.denom();
                    num > 0 && num % den == 0 && (num / den) % l.heads as i64 == 0
                })
            };
            while !check(&cfg) {
                cfg = sample_stage_config(spec, Stage::Global, fixed, rng);
            }
            cfg
        }
        Stage::Local => {
            let combos = buildable_locals(spec, cfg.embed_dim);
            for l in cfg.locals.iter_mut() {
                let num = l.expand.numer() * cfg.embed_dim as i64;
                let den = *l.expand.denom();
                let ok = num > 0 && num % den == 0 && (num / den) % l.heads as i64 == 0;
                if !ok {
                    *l = combos[rng.random_range(0..combos.len())];
                }
            }
            cfg
        }
    }
}

/// Evolve the active stage and return the all-time best config plus the
/// per-generation history. The supplied `incumbent` is injected into the
/// initial population (elitist carry-over across rounds).
#[allow(clippy::too_many_arguments)]
pub fn evolve_stage<F: Fitness>(
    ctx: &StageCtx,
    fitness: &mut F,
    stage: Stage,
    incumbent: &ArchConfig,
    opts: &EvolveOptions,
    round: usize,
    seed: u64,
    history: &mut Vec<GenRecord>,
) -> Result<ArchConfig, SearchError> {
    let spec = ctx.space.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = opts.population.max(1);
    let mut population: Vec<ArchConfig> = Vec::with_capacity(p);
    population.push(incumbent.clone());
    while population.len() < p {
        population.push(sample_stage_config(&spec, stage, incumbent, &mut rng));
    }

    let mut cache: BTreeMap<ArchConfig, f64> = BTreeMap::new();
    let mut best: Option<(ArchConfig, f64, u64)> = None;

    for gen in 0..opts.generations.max(1) {
        // evaluate (with caching) in population order
        let mut scored: Vec<(ArchConfig, f64, u64)> = Vec::with_capacity(population.len());
        let mut sum = 0.0;
        for cfg in &population {
            let fit = match cache.get(cfg) {
                Some(&f) => f,
                None => {
                    let f = fitness.fitness(cfg)?;
                    cache.insert(cfg.clone(), f);
                    f
                }
            };
            sum += fit;
            let params = params_of(cfg, ctx.classes, ctx.patch, ctx.in_channels);
            scored.push((cfg.clone(), fit, params));
        }
        scored.sort_by(|a, b| rank_key(a.1, a.2, &a.0).cmp(&rank_key(b.1, b.2, &b.0)));

        // all-time best, same ordering
        let top = &scored[0];
        let better = match &best {
            None => true,
            Some((bc, bf, bp)) => {
                rank_key(top.1, top.2, &top.0) < rank_key(*bf, *bp, bc)
            }
        };
        if better {
            best = Some(top.clone());
        }
        let (bc, bf, _) = best.as_ref().unwrap();
        history.push(GenRecord {
            round,
            stage,
            gen,
            best_fitness: *bf,
            mean_fitness: sum / population.len() as f64,
            best_cfg: bc.clone(),
        });

        if gen + 1 == opts.generations {
            break;
        }
        // next generation: elites survive, children refill
        let n_elite = ((p as f64) * opts.elite_frac).ceil().max(1.0) as usize;
        let elites: Vec<ArchConfig> = scored.iter().take(n_elite.min(p)).map(|(c, _, _)| c.clone()).collect();
        let mut next = elites.clone();
        while next.len() < p {
            let child = if rng.random::<f64>() < opts.crossover_prob && elites.len() >= 2 {
                let a = &elites[rng.random_range(0..elites.len())];
                let b = &elites[rng.random_range(0..elites.len())];
                crossover(&spec, a, b, stage, &mut rng)
            } else {
                let a = &elites[rng.random_range(0..elites.len())];
                mutate(&spec, a, opts.mutation_rate, stage, &mut rng)
            };
            // fixed parts must not drift
            let child = match stage {
                Stage::Global => ArchConfig {
                    locals: fit_fixed_locals(&incumbent.locals, child.depth),
                    ..child
                },
                Stage::Local => ArchConfig {
                    depth: incumbent.depth,
                    channels: incumbent.channels,
                    embed_dim: incumbent.embed_dim,
                    locals: child.locals,
                },
            };
            next.push(repair(&spec, stage, incumbent, child, &mut rng));
        }
        population = next;
    }
    Ok(best.expect("at least one generation ran").0)
}
