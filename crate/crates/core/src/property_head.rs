//! MLP regressor on z₁ used for property fine-tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

/// `y = silu(z W₁ + b₁) W₂ + b₂`
#[derive(Clone, Debug)]
pub struct RegressionHead {
    hidden: Linear,
    output: Linear,
}

impl RegressionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &HeadConfig,
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Head;
        Self {
            hidden: Linear::new(store, "head.hidden", g, latent_dim, cfg.hidden, rng),
            output: Linear::new(store, "head.output", g, cfg.hidden, 1, rng),
        }
    }

    pub fn layers(&self) -> [&Linear; 2] {
        [&self.hidden, &self.output]
    }

    /// `n x 1` predictions for the rows of `z1`.
    pub fn forward(&self, tape: &mut Tape<'_>, z1: Var) -> Var {
        let h = self.hidden.forward(tape, z1);
        let h = tape.silu(h);
        self.output.forward(tape, h)
    }

    pub fn predict(&self, store: &ParamStore, z1: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let z = tape.constant(z1.clone());
        let y = self.forward(&mut tape, z);
        let out = tape.value(y);
        ensure_finite(out, "regression head")?;
        Ok(out.data().to_vec())
    }
}

/// Affine map to zero mean and unit variance, fitted on training targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    /// Population statistics of `values`; a constant column gets `std = 1`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySplit);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn apply(&self, value: f64) -> f64 {
        (value - self.mean) / self.std
    }

    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }
}

pub fn mean_squared_error(predicted: &[f64], targets: &[f64]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::EmptySplit);
    }
    if predicted.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    Ok(predicted
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / predicted.len() as f64)
}
