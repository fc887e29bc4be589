//! Output files: names, hashes, metrics tables and run metadata.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use moldiff::checkpoint::write_atomic;
use moldiff::training::StepRecord;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const PRETRAIN_META: &str = "pretrain_meta.toml";
pub const PRETRAIN_REJECTS: &str = "pretrain_rejects.csv";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const FINETUNE_META: &str = "finetune_meta.toml";
pub const FINETUNE_REJECTS: &str = "finetune_rejects.csv";
pub const EVAL_TABLE: &str = "eval.csv";
pub const LATENTS: &str = "latents.csv";
pub const ENCODE_REJECTS: &str = "encode_rejects.csv";
pub const SAMPLES: &str = "samples.csv";

/// Checkpoint tensor with the training-set size histogram.
pub const SIZE_HISTOGRAM: &str = "meta.size_histogram";
/// Checkpoint tensor `[mean, std]` of the fine-tuning targets.
pub const TARGET_STANDARDIZATION: &str = "meta.target_standardization";

/// Git-style object hash: SHA-256 over `blob <len>\0<content>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: content_hash(&bytes),
        })
    }
}

pub fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Everything about a run that is not a reproducible artifact.
#[derive(Debug, Serialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config_hash: String,
    pub atom_categories: usize,
    pub bond_categories: usize,
    pub records: usize,
    pub rejects: usize,
    pub steps: usize,
    pub inputs: Vec<InputDigest>,
    pub config: RunConfig,
}

impl RunMetadata {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing run metadata")?;
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

/// Accumulates per-step rows as CSV text.
pub struct MetricsLog {
    text: String,
    supervised: bool,
}

impl MetricsLog {
    pub fn new(supervised: bool) -> Self {
        let header = if supervised {
            "step,recon,prior_kl,denoise,elbo,mse,loss,grad_norm\n"
        } else {
            "step,recon,prior_kl,denoise,elbo,grad_norm\n"
        };
        Self {
            text: header.to_string(),
            supervised,
        }
    }

    pub fn push(&mut self, r: &StepRecord) {
        let b = &r.breakdown;
        let row = if self.supervised {
            format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                b.recon,
                b.prior_kl,
                b.denoise,
                b.elbo,
                r.mse.unwrap_or(f64::NAN),
                r.loss,
                r.grad_norm
            )
        } else {
            format!(
                "{},{},{},{},{},{}\n",
                r.step, b.recon, b.prior_kl, b.denoise, b.elbo, r.grad_norm
            )
        };
        self.text.push_str(&row);
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub split: String,
    pub model: String,
    pub mse: f64,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "split", "model", "mse"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([r.dataset.as_str(), &r.split, &r.model, &r.mse.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
