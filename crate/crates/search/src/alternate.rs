//! The alternating controller: global search with the locals fixed, then
//! local search with the found globals fixed, repeated for K rounds. Each
//! stage first (re)trains the stage supernet from the previous round's
//! weights (warm start), then runs the evolutionary search with the
//! incumbent carried into the new population.

use std::io::Write;
use std::path::Path;

use glvm_core::space::{ArchConfig, Stage};
use glvm_harness::data::VeinDataset;

use crate::evolve::{evolve_stage, EvolveOptions, Fitness, GenRecord, StageCtx};
use crate::supernet::{default_local, Supernet};
use crate::trainer::{evaluate_subnet, fit_fixed_locals, train_supernet, SupernetTrainOptions};
use crate::SearchError;

/// A search environment: stage preparation (supernet training in
/// production, a no-op for surrogate fitness) plus candidate scoring.
pub trait SearchEnv {
    fn prepare_stage(
        &mut self,
        round: usize,
        stage: Stage,
        fixed: &ArchConfig,
    ) -> Result<(), SearchError>;
    fn fitness(&mut self, cfg: &ArchConfig) -> Result<f64, SearchError>;
    fn supernet(&self) -> &Supernet;
}

#[derive(Debug, Clone)]
pub struct GlanasOptions {
    /// Number of global/local alternation rounds K.
    pub rounds: usize,
    pub evolve: EvolveOptions,
    pub seed: u64,
}

impl Default for GlanasOptions {
    fn default() -> Self {
        GlanasOptions {
            rounds: 2,
            evolve: EvolveOptions::default(),
            seed: 0,
        }
    }
}

pub struct GlanasResult {
    /// The final incumbent: searched (N, C, D) plus per-block (T, E, V).
    pub best: ArchConfig,
    pub history: Vec<GenRecord>,
}

/// Run the alternating search. Round 1 searches the globals with the locals
/// initialized to the default triple (4, 2, 16), then the locals with the
/// found globals fixed; later rounds alternate with the latest incumbent
/// fixed.
pub fn glanas<E: SearchEnv>(env: &mut E, opts: &GlanasOptions) -> Result<GlanasResult, SearchError> {
    if opts.rounds == 0 {
        return Err(SearchError::Space("rounds must be >= 1".into()));
    }
    let mut history = Vec::new();
    // round-1 incumbent: maximal-ish globals with default locals; the
    // initial population is random apart from this seed entry
    let space = env.supernet().space.clone();
    let depth0 = space.depths()[0];
    let mut incumbent = ArchConfig {
        depth: depth0,
        channels: space.channel_values()[0],
        embed_dim: space.embed_values()[0],
        locals: fit_fixed_locals(&[], depth0),
    };
    let _ = default_local();

    for round in 1..=opts.rounds {
        for stage in [Stage::Global, Stage::Local] {
            env.prepare_stage(round, stage, &incumbent)?;
            let stage_seed = opts
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((round as u64) << 8)
                .wrapping_add(match stage {
                    Stage::Global => 1,
                    Stage::Local => 2,
                });
            struct EnvFitness<'a, E: SearchEnv>(&'a mut E);
            impl<'a, E: SearchEnv> Fitness for EnvFitness<'a, E> {
                fn fitness(&mut self, cfg: &ArchConfig) -> Result<f64, SearchError> {
                    self.0.fitness(cfg)
                }
            }
            let ctx = StageCtx::of(env.supernet());
            let mut fit = EnvFitness(env);
            incumbent = evolve_stage(
                &ctx,
                &mut fit,
                stage,
                &incumbent,
                &opts.evolve,
                round,
                stage_seed,
                &mut history,
            )?;
        }
    }
    Ok(GlanasResult {
        best: incumbent,
        history,
    })
}

/// Production environment: supernet warm-start training per stage, fitness
/// by validation accuracy of the sliced subnet.
pub struct SupernetEnv<'a> {
    pub supernet: Supernet,
    pub data: &'a VeinDataset,
    pub train_opts: SupernetTrainOptions,
    /// Calibration batch size for subnet BN recalibration.
    pub calib: usize,
    pub eval_batch: usize,
}

impl<'a> SearchEnv for SupernetEnv<'a> {
    fn prepare_stage(
        &mut self,
        round: usize,
        stage: Stage,
        fixed: &ArchConfig,
    ) -> Result<(), SearchError> {
        let mut opts = self.train_opts.clone();
        // distinct sampling streams per stage, still deterministic
        opts.seed = opts
            .seed
            .wrapping_add((round as u64) * 1000)
            .wrapping_add(match stage {
                Stage::Global => 0,
                Stage::Local => 500,
            });
        train_supernet(&mut self.supernet, stage, fixed, self.data, &opts)?;
        Ok(())
    }

    fn fitness(&mut self, cfg: &ArchConfig) -> Result<f64, SearchError> {
        evaluate_subnet(&self.supernet, cfg, self.data, self.calib, self.eval_batch)
    }

    fn supernet(&self) -> &Supernet {
        &self.supernet
    }
}

/// Per-generation CSV: (round, stage, gen, best_acc, mean_acc, best_cfg).
pub fn write_history_csv(path: &Path, history: &[GenRecord]) -> Result<(), SearchError> {
    let mut f = std::fs::File::create(path).map_err(|e| SearchError::Io(e.to_string()))?;
    writeln!(f, "round,stage,gen,best_acc,mean_acc,best_cfg")
        .map_err(|e| SearchError::Io(e.to_string()))?;
    for r in history {
        let stage = match r.stage {
            Stage::Global => "global",
            Stage::Local => "local",
        };
        writeln!(
            f,
            "{},{},{},{},{},\"{}\"",
            r.round, stage, r.gen, r.best_fitness, r.mean_fitness, r.best_cfg
        )
        .map_err(|e| SearchError::Io(e.to_string()))?;
    }
    Ok(())
}
