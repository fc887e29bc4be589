//! The pipeline stages behind each subcommand.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moldiff::checkpoint::{write_atomic, Checkpoint};
use moldiff::checks::{self, CheckOutcome};
use moldiff::dataset::{self, holdout_split, rejects_csv, LoadedDataset, MoleculeRecord};
use moldiff::model::SizeHistogram;
use moldiff::params::ParamGroup;
use moldiff::property_head::{mean_squared_error, Standardization};
use moldiff::training::{train, StepRecord, TrainMode};
use moldiff::{Error, Execution, Model, MolecularGraph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::*;
use crate::config::RunConfig;

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}

fn prepare_output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn load_dataset(cfg: &RunConfig, path: &Path, has_target: bool) -> Result<LoadedDataset> {
    require_file(path)?;
    let codec = cfg.model.codec()?;
    let data = dataset::load(path, &codec, has_target, cfg.model.max_nodes)?;
    if data.records.is_empty() {
        bail!(
            "{}: no usable molecules ({} rejected)",
            path.display(),
            data.rejects.len()
        );
    }
    Ok(data)
}

fn progress(cfg: &RunConfig, label: &str, r: &StepRecord) {
    if cfg.progress_every > 0 && r.step.is_multiple_of(cfg.progress_every) {
        let mse = r.mse.map_or(String::new(), |m| format!(" mse {m:.4}"));
        eprintln!(
            "{label} step {} loss {:.4} elbo {:.4}{mse} |g| {:.3}",
            r.step, r.loss, r.breakdown.elbo, r.grad_norm
        );
    }
}

/// Loads a checkpoint written under the same `[model]` section.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(Model, Checkpoint)> {
    require_file(path)?;
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let expected = cfg.model_hash();
    if ckpt.config_hash != expected {
        return Err(Error::IncompatibleCheckpoint {
            expected,
            found: ckpt.config_hash.clone(),
        }
        .into());
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    ckpt.apply_to(&mut model)?;
    Ok((model, ckpt))
}

/// The fine-tuned checkpoint when present, else the pretrained one.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    let dir = cfg.output_dir();
    let ft = dir.join(FINETUNE_CHECKPOINT);
    if ft.is_file() {
        ft
    } else {
        dir.join(PRETRAIN_CHECKPOINT)
    }
}

pub struct PretrainOutcome {
    pub model: Model,
    pub steps: usize,
    pub last: Option<StepRecord>,
}

pub fn pretrain(cfg: &RunConfig, exec: Execution) -> Result<PretrainOutcome> {
    let started = unix_seconds();
    let data = load_dataset(cfg, &cfg.data.pretrain, false)?;
    let input = InputDigest::of(&cfg.data.pretrain)?;
    let graphs = data.graphs();
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut log = MetricsLog::new(false);
    let mut last = None;
    let steps = train(
        &mut model,
        &graphs,
        None,
        TrainMode::Pretrain,
        &cfg.train,
        &ParamGroup::ALL,
        cfg.seed,
        exec,
        |r, _| {
            log.push(r);
            progress(cfg, "pretrain", r);
            last = Some(*r);
            Ok(ControlFlow::Continue(()))
        },
    )?;

    let dir = prepare_output_dir(cfg)?;
    let sizes = SizeHistogram::from_graphs(&graphs, cfg.model.max_nodes)?;
    let extra = vec![(
        SIZE_HISTOGRAM.to_string(),
        Tensor::row_vector(sizes.weights().to_vec()),
    )];
    Checkpoint::from_model(&model, cfg.model_hash(), cfg.to_toml(), extra)
        .save(&dir.join(PRETRAIN_CHECKPOINT))?;
    write_atomic(&dir.join(PRETRAIN_METRICS), log.as_str().as_bytes())?;
    write_atomic(
        &dir.join(PRETRAIN_REJECTS),
        rejects_csv(&data.rejects).as_bytes(),
    )?;
    RunMetadata {
        command: "pretrain".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix: started,
        finished_unix: unix_seconds(),
        config_hash: cfg.model_hash(),
        atom_categories: model.codec.num_atom_types(),
        bond_categories: model.codec.num_bond_types(),
        records: data.records.len(),
        rejects: data.rejects.len(),
        steps,
        inputs: vec![input],
        config: cfg.clone(),
    }
    .write(&dir.join(PRETRAIN_META))?;
    Ok(PretrainOutcome { model, steps, last })
}

/// Holdout split of the labelled data with standardized targets.
pub struct LabelledSplit {
    pub dataset: String,
    pub standardization: Standardization,
    pub train: (Vec<MolecularGraph>, Vec<f64>),
    pub test: (Vec<MolecularGraph>, Vec<f64>),
    pub rejects: Vec<dataset::Reject>,
    pub records: usize,
}

fn unpack(records: &[MoleculeRecord], st: &Standardization) -> (Vec<MolecularGraph>, Vec<f64>) {
    records
        .iter()
        .map(|r| {
            (
                r.graph.clone(),
                st.apply(r.target.expect("labelled dataset")),
            )
        })
        .unzip()
}

/// Splits the fine-tuning data; `stored` reuses standardization from a
/// checkpoint instead of fitting it on the training split.
pub fn labelled_split(cfg: &RunConfig, stored: Option<Standardization>) -> Result<LabelledSplit> {
    let path = &cfg.data.finetune;
    let data = load_dataset(cfg, path, true)?;
    let (train_recs, test_recs) = holdout_split(&data.records, &cfg.split)?;
    let st = match stored {
        Some(s) => s,
        None => Standardization::fit(
            &train_recs
                .iter()
                .map(|r| r.target.expect("labelled"))
                .collect::<Vec<_>>(),
        )?,
    };
    Ok(LabelledSplit {
        dataset: path
            .file_stem()
            .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
        train: unpack(&train_recs, &st),
        test: unpack(&test_recs, &st),
        standardization: st,
        rejects: data.rejects,
        records: data.records.len(),
    })
}

/// Standardized-unit MSE of `model` on `graphs`, using the zero-noise z₁.
pub fn evaluate_mse(
    model: &Model,
    graphs: &[MolecularGraph],
    targets: &[f64],
    exec: Execution,
) -> Result<f64> {
    let z1 = model.encode_mean_z1(graphs, exec)?;
    Ok(mean_squared_error(&model.predict(&z1)?, targets)?)
}

fn eval_rows(
    split: &LabelledSplit,
    tag: &str,
    model: &Model,
    exec: Execution,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (name, (g, y)) in [("train", &split.train), ("test", &split.test)] {
        rows.push(EvalRow {
            dataset: split.dataset.clone(),
            split: name.into(),
            model: tag.into(),
            mse: evaluate_mse(model, g, y, exec)?,
        });
    }
    Ok(rows)
}

pub struct FinetuneOutcome {
    pub model: Model,
    pub rows: Vec<EvalRow>,
}

pub fn finetune(cfg: &RunConfig, checkpoint: &Path, exec: Execution) -> Result<FinetuneOutcome> {
    let started = unix_seconds();
    let (mut model, ckpt) = load_checkpoint(cfg, checkpoint)?;
    let split = labelled_split(cfg, None)?;
    let inputs = vec![
        InputDigest::of(checkpoint)?,
        InputDigest::of(&cfg.data.finetune)?,
    ];
    let tc = cfg.finetune.train_config(&cfg.train);
    let mut log = MetricsLog::new(true);
    let steps = train(
        &mut model,
        &split.train.0,
        Some(&split.train.1),
        TrainMode::Finetune {
            lambda: cfg.finetune.lambda,
        },
        &tc,
        cfg.finetune.unfreeze.groups(),
        cfg.seed,
        exec,
        |r, _| {
            log.push(r);
            progress(cfg, "finetune", r);
            Ok(ControlFlow::Continue(()))
        },
    )?;
    let mut rows = eval_rows(&split, "finetuned", &model, exec)?;

    if cfg.finetune.baseline {
        let mut baseline = Model::new(cfg.model.clone(), cfg.seed)?;
        train(
            &mut baseline,
            &split.train.0,
            Some(&split.train.1),
            TrainMode::Regression,
            &tc,
            &[ParamGroup::Encoder, ParamGroup::Head],
            cfg.seed,
            exec,
            |r, _| {
                progress(cfg, "baseline", r);
                Ok(ControlFlow::Continue(()))
            },
        )?;
        rows.extend(eval_rows(&split, "encoder_only", &baseline, exec)?);
    }

    let dir = prepare_output_dir(cfg)?;
    let st = &split.standardization;
    let mut extra = vec![(
        TARGET_STANDARDIZATION.to_string(),
        Tensor::row_vector(vec![st.mean, st.std]),
    )];
    if let Some(h) = ckpt.tensor(SIZE_HISTOGRAM) {
        extra.push((SIZE_HISTOGRAM.to_string(), h.clone()));
    }
    Checkpoint::from_model(&model, cfg.model_hash(), cfg.to_toml(), extra)
        .save(&dir.join(FINETUNE_CHECKPOINT))?;
    write_atomic(&dir.join(FINETUNE_METRICS), log.as_str().as_bytes())?;
    write_atomic(
        &dir.join(FINETUNE_REJECTS),
        rejects_csv(&split.rejects).as_bytes(),
    )?;
    write_atomic(&dir.join(EVAL_TABLE), eval_csv(&rows).as_bytes())?;
    RunMetadata {
        command: "finetune".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix: started,
        finished_unix: unix_seconds(),
        config_hash: cfg.model_hash(),
        atom_categories: model.codec.num_atom_types(),
        bond_categories: model.codec.num_bond_types(),
        records: split.records,
        rejects: split.rejects.len(),
        steps,
        inputs,
        config: cfg.clone(),
    }
    .write(&dir.join(FINETUNE_META))?;
    Ok(FinetuneOutcome { model, rows })
}

/// Train/test MSE of a fine-tuned checkpoint on the configured split.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, exec: Execution) -> Result<Vec<EvalRow>> {
    let (model, ckpt) = load_checkpoint(cfg, checkpoint)?;
    let st = ckpt
        .tensor(TARGET_STANDARDIZATION)
        .filter(|t| t.len() == 2)
        .with_context(|| {
            format!(
                "{} has no target standardization; run finetune first",
                checkpoint.display()
            )
        })?;
    let st = Standardization {
        mean: st.data()[0],
        std: st.data()[1],
    };
    let split = labelled_split(cfg, Some(st))?;
    eval_rows(&split, "finetuned", &model, exec)
}

/// Writes `smiles,z1_1..z1_d` for every parseable row of `input`.
/// Returns (rows written, rows rejected).
pub fn encode(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    exec: Execution,
) -> Result<(usize, usize)> {
    let (model, _) = load_checkpoint(cfg, checkpoint)?;
    require_file(input)?;
    let data = dataset::load(input, &model.codec, false, cfg.model.max_nodes)?;
    let z1 = model.encode_mean_z1(&data.graphs(), exec)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["smiles".to_string()];
    header.extend((1..=model.latent_dim()).map(|i| format!("z1_{i}")));
    w.write_record(&header)?;
    for (b, rec) in data.records.iter().enumerate() {
        let mut row = vec![rec.smiles.clone()];
        row.extend(z1.row(b).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    let text = w.into_inner().context("flushing latent table")?;
    if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    write_atomic(output, &text)?;
    let rejects_path = output.with_file_name(ENCODE_REJECTS);
    write_atomic(&rejects_path, rejects_csv(&data.rejects).as_bytes())?;
    Ok((data.records.len(), data.rejects.len()))
}

/// Draws `count` molecules and returns their SMILES.
pub fn sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    count: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<String>> {
    let (model, ckpt) = load_checkpoint(cfg, checkpoint)?;
    let sizes = ckpt
        .tensor(SIZE_HISTOGRAM)
        .with_context(|| format!("{} has no size histogram", checkpoint.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = model.sample(count, sizes.data(), &mut rng, exec)?;
    graphs
        .iter()
        .map(|g| model.codec.write(g).map_err(anyhow::Error::from))
        .collect()
}

pub fn samples_csv(smiles: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["smiles"]).expect("in-memory write");
    for s in smiles {
        w.write_record([s]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Runs the oracle suite against `cfg`'s schedule, optionally after
/// overwriting one ᾱ entry.
pub fn check(cfg: &RunConfig, corrupt_alpha_bar: Option<usize>) -> Result<Vec<CheckOutcome>> {
    let mut schedule = cfg.model.schedule.build()?;
    if let Some(t) = corrupt_alpha_bar {
        schedule.check_step(t)?;
        let v = schedule.alpha_bar(t);
        schedule.corrupt_alpha_bar_for_test(t, v * 0.5);
    }
    Ok(checks::run_all(&schedule)?)
}
