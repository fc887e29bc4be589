//! Seeded training loops shared by pretraining, fine-tuning and the
//! regression-only baseline.

use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::batch_indices;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::molgraph::MolecularGraph;
use crate::objective::{train_step, Adam, ElboBreakdown, ElboDraws, Objective, TrainConfig};
use crate::par::Execution;
use crate::params::ParamGroup;

/// Which loss the loop minimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainMode {
    Pretrain,
    Finetune {
        lambda: f64,
    },
    /// Squared error only; used for the encoder-plus-head baseline.
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub breakdown: ElboBreakdown,
    pub mse: Option<f64>,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Runs up to `cfg.steps` optimizer steps over shuffled mini-batches.
/// `observer` sees every step after the update and may stop the run early.
/// Returns the number of steps taken.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut Model,
    graphs: &[MolecularGraph],
    targets: Option<&[f64]>,
    mode: TrainMode,
    cfg: &TrainConfig,
    groups: &[ParamGroup],
    seed: u64,
    exec: Execution,
    mut observer: impl FnMut(&StepRecord, &Model) -> Result<ControlFlow<()>>,
) -> Result<usize> {
    cfg.validate()?;
    if graphs.is_empty() {
        return Err(Error::EmptySplit);
    }
    if mode != TrainMode::Pretrain && targets.is_none_or(|t| t.len() != graphs.len()) {
        return Err(Error::ShapeMismatch(
            "supervised training needs one target per graph".into(),
        ));
    }
    let mut optimizer = Adam::new(&model.store, cfg);
    let mut draw_rng = ChaCha8Rng::seed_from_u64(seed);
    draw_rng.set_stream(u64::MAX);
    let (d, steps) = (model.latent_dim(), model.schedule.steps());

    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        for idx in batch_indices(graphs.len(), cfg.batch_size, seed, epoch) {
            if step >= cfg.steps {
                break;
            }
            let batch: Vec<MolecularGraph> = idx.iter().map(|&i| graphs[i].clone()).collect();
            let batch_targets: Vec<f64> =
                targets.map_or_else(Vec::new, |t| idx.iter().map(|&i| t[i]).collect());
            let objective = match mode {
                TrainMode::Pretrain => Objective::Elbo,
                TrainMode::Finetune { lambda } => Objective::Finetune {
                    targets: &batch_targets,
                    lambda,
                },
                TrainMode::Regression => Objective::Regression {
                    targets: &batch_targets,
                },
            };
            let draws = ElboDraws::sample(&mut draw_rng, batch.len(), d, steps);
            let r = train_step(
                model,
                &mut optimizer,
                &batch,
                &draws,
                objective,
                cfg,
                groups,
                step + 1,
                exec,
            )?;
            step += 1;
            let record = StepRecord {
                step,
                breakdown: r.report.breakdown,
                mse: r.report.mse,
                loss: r.report.loss,
                grad_norm: r.grad_norm,
            };
            if observer(&record, model)?.is_break() {
                return Ok(step);
            }
        }
        epoch += 1;
    }
    Ok(step)
}
