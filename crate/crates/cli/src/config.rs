//! Run configuration: one TOML file holding every module setting.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moldiff::dataset::SplitSpec;
use moldiff::objective::TrainConfig;
use moldiff::params::ParamGroup;
use moldiff::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Overrides `output_dir` when set.
pub const OUT_DIR_ENV: &str = "MOLDIFF_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Print a progress line every this many steps; 0 disables.
    pub progress_every: usize,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub sample: SampleConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            progress_every: 100,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            sample: SampleConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV with a `smiles` column.
    pub pretrain: PathBuf,
    /// CSV with `smiles` and `target` columns.
    pub finetune: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain: PathBuf::from("fixtures/corpus100.csv"),
            finetune: PathBuf::from("fixtures/corpus100.csv"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unfreeze {
    All,
    EncoderHead,
    Head,
}

impl Unfreeze {
    pub fn groups(self) -> &'static [ParamGroup] {
        match self {
            Unfreeze::All => &ParamGroup::ALL,
            Unfreeze::EncoderHead => &[ParamGroup::Encoder, ParamGroup::Head],
            Unfreeze::Head => &[ParamGroup::Head],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub unfreeze: Unfreeze,
    /// Also train the encoder-plus-head regressor from scratch and report it.
    pub baseline: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 16,
            unfreeze: Unfreeze::All,
            baseline: true,
        }
    }
}

impl FinetuneConfig {
    /// `base` with this section's step count, rate and batch size.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.steps,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { count: 100 }
    }
}

impl RunConfig {
    /// Reads `path`. Relative data paths and `output_dir` are resolved
    /// against the directory holding the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg =
            Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.pretrain,
            &mut cfg.data.finetune,
            &mut cfg.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.train_config(&self.train).validate()?;
        if !(self.finetune.lambda >= 0.0 && self.finetune.lambda.is_finite()) {
            bail!("finetune.lambda must be finite and non-negative");
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            bail!("split.train_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// `output_dir`, unless the override variable is set.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// Identifies the architecture: SHA-256 of the `[model]` section.
    pub fn model_hash(&self) -> String {
        let text = toml::to_string(&self.model).expect("model config is representable as TOML");
        hex(&Sha256::digest(text.as_bytes()))
    }

    /// The default configuration with every key documented inline.
    pub fn commented_default() -> String {
        annotate(&Self::default().to_toml())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Puts the comment for each `section.key` on the line above it.
fn annotate(toml_text: &str) -> String {
    let mut out = String::from(
        "# moldiff run configuration. Relative paths resolve against this file's directory.\n",
    );
    let mut section = String::new();
    for line in toml_text.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.to_string();
            if !out.ends_with("\n\n") {
                out.push('\n');
            }
            if let Some(c) = comment(&section) {
                out.push_str(&format!("# {c}\n"));
            }
        } else if let Some((key, _)) = trimmed.split_once(" = ") {
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if let Some(c) = comment(&full) {
                out.push_str(&format!("# {c}\n"));
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn comment(key: &str) -> Option<&'static str> {
    let c = match key {
        "seed" => "Seeds parameter init, batching and every noise draw.",
        "output_dir" => "Where artifacts go; MOLDIFF_OUT_DIR overrides it.",
        "progress_every" => "Progress line to stderr every N steps (0 = quiet).",
        "data" => "Input datasets (CSV with a header row).",
        "data.pretrain" => "Unlabelled molecules: needs a `smiles` column.",
        "data.finetune" => "Labelled molecules: needs `smiles` and `target` columns.",
        "split" => "Holdout split of the fine-tuning data.",
        "split.train_fraction" => {
            "Training share; the training split gets ceil(n * fraction) records."
        }
        "split.seed" => "Shuffle seed of the split.",
        "train" => "Pretraining optimizer (Adam). Fine-tuning reuses grad_clip, beta1 and beta2.",
        "train.learning_rate" => "Step size.",
        "train.batch_size" => "Molecules per step.",
        "train.steps" => "Optimizer steps.",
        "train.grad_clip" => "Global gradient-norm ceiling.",
        "train.beta1" => "First-moment decay.",
        "train.beta2" => "Second-moment decay.",
        "finetune" => "Property regression: loss = -elbo + lambda * MSE on standardized targets.",
        "finetune.lambda" => "Weight of the squared-error term.",
        "finetune.steps" => "Optimizer steps.",
        "finetune.learning_rate" => "Step size.",
        "finetune.batch_size" => "Molecules per step.",
        "finetune.unfreeze" => "Trainable groups: \"all\", \"encoder_head\" or \"head\".",
        "finetune.baseline" => {
            "Also train an encoder + head regressor from scratch for comparison."
        }
        "sample" => "Generation.",
        "sample.count" => "Molecules drawn by `sample` when -n is not given.",
        "model" => "Architecture. Checkpoints record a hash of this section.",
        "model.max_nodes" => "Largest molecule, in heavy atoms.",
        "model.latent_dim" => "Width of every latent z_t.",
        "model.atom_symbols" => {
            "Atom categories in index order (organic subset, aromatic as lowercase)."
        }
        "model.schedule" => "Linear variance schedule.",
        "model.schedule.steps" => "Chain length T.",
        "model.schedule.beta_start" => "beta_1.",
        "model.schedule.beta_end" => "beta_T.",
        "model.encoder" | "model.decoder" => "Pre-norm transformer stack.",
        "model.encoder.n_layers" | "model.decoder.n_layers" => "Blocks.",
        "model.encoder.n_heads" | "model.decoder.n_heads" => {
            "Attention heads; must divide d_model."
        }
        "model.encoder.d_model" | "model.decoder.d_model" => "Token width.",
        "model.encoder.ff_width" | "model.decoder.ff_width" => "Feed-forward hidden width.",
        "model.encoder.dropout" | "model.decoder.dropout" => "Dropout rate during training.",
        "model.denoiser" => "Noise-prediction MLP of the reverse chain.",
        "model.denoiser.hidden" => "Hidden width.",
        "model.denoiser.time_embed_dim" => "Sinusoidal step-embedding width (even).",
        "model.head" => "Regression MLP on z_1.",
        "model.head.hidden" => "Hidden width.",
        _ => return None,
    };
    Some(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commented_default_parses_back_to_default() {
        let text = RunConfig::commented_default();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_documented() {
        let text = RunConfig::default().to_toml();
        let mut section = String::new();
        for line in text.lines().map(str::trim) {
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.to_string();
                assert!(comment(&section).is_some(), "{section}");
            } else if let Some((key, _)) = line.split_once(" = ") {
                let full = if section.is_empty() {
                    key.to_string()
                } else {
                    format!("{section}.{key}")
                };
                assert!(comment(&full).is_some(), "{full}");
            }
        }
    }

    #[test]
    fn round_trips_non_default_values() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.finetune.unfreeze = Unfreeze::EncoderHead;
        cfg.model.schedule.beta_start = 3.3e-5;
        cfg.train.learning_rate = 0.1 + 0.2;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml("seed = 4\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch_size, 16);
        assert!(RunConfig::from_toml("sed = 4\n").is_err());
        assert!(RunConfig::from_toml("[finetune]\nlambda = -1.0\n").is_err());
    }

    #[test]
    fn model_hash_tracks_architecture_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 5;
        b.train.steps = 1;
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.latent_dim = 8;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
