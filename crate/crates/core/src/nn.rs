//! Layers shared by the encoder, decoder, denoiser and regression head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Shape of a pre-norm transformer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Hidden width of the position-wise feed-forward sublayer.
    pub ff_width: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            ff_width: 128,
            dropout: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "{what}: d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ff_width == 0 {
            return Err(Error::InvalidConfig(format!(
                "{what}: ff_width must be positive"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "{what}: dropout must be in [0, 1)"
            )));
        }
        Ok(())
    }
}

/// Training-time dropout masks. Evaluation passes `None` instead.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Option<Self> {
        (rate > 0.0).then(|| Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        let (rows, cols) = tape.value(x).shape();
        let keep = 1.0 - self.rate;
        let mask = (0..rows * cols)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = tape.constant(Tensor::from_vec(rows, cols, mask));
        tape.mul(x, m)
    }
}

pub(crate) fn maybe_dropout(
    dropout: &mut Option<&mut Dropout>,
    tape: &mut Tape<'_>,
    x: Var,
) -> Var {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_weight(format!("{name}.weight"), group, fan_in, fan_out, rng),
            bias: store.add_zeros(format!("{name}.bias"), group, 1, fan_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), group, 1, width, 1.0),
            bias: store.add_zeros(format!("{name}.bias"), group, 1, width),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm block: `x + attn(norm(x))` then `x + ffn(norm(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    n_heads: usize,
    d_model: usize,
    attn_norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ff_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            n_heads: cfg.n_heads,
            d_model: d,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), group, d),
            query: Linear::new(store, &format!("{name}.query"), group, d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), group, d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), group, d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), group, d, d, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), group, d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), group, d, cfg.ff_width, rng),
            ff_out: Linear::new(
                store,
                &format!("{name}.ff_out"),
                group,
                cfg.ff_width,
                d,
                rng,
            ),
        }
    }

    /// `head_bias(tape, h)` may add an `n x n` term to head `h`'s scores.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        head_bias: &mut dyn FnMut(&mut Tape<'_>, usize) -> Option<Var>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Var {
        let h = self.attn_norm.forward(tape, x);
        let q = self.query.forward(tape, h);
        let k = self.key.forward(tape, h);
        let v = self.value.forward(tape, h);
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for head in 0..self.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(bias) = head_bias(tape, head) {
                scores = tape.add(scores, bias);
            }
            let attn = tape.softmax(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let attn_out = self.output.forward(tape, merged);
        let attn_out = maybe_dropout(dropout, tape, attn_out);
        let x = tape.add(x, attn_out);

        let h = self.ff_norm.forward(tape, x);
        let h = self.ff_in.forward(tape, h);
        let h = tape.silu(h);
        let ff = self.ff_out.forward(tape, h);
        let ff = maybe_dropout(dropout, tape, ff);
        tape.add(x, ff)
    }
}

/// Checks an evaluated output and maps non-finite values to an error.
pub(crate) fn ensure_finite(t: &Tensor, what: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(what))
    }
}
