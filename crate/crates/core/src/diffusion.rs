//! Forward noising chain over the latents z₁…z_T, its closed-form marginal,
//! the noise predictor ε_w and the reverse (ancestral) chain.
//!
//! Every stochastic operation takes its standard-normal draws as an
//! argument. Only [`ancestral_sample`] owns an RNG, and it just generates
//! the draws for [`ancestral_sample_from`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Width of both hidden layers.
    pub hidden: usize,
    /// Width of the sinusoidal time embedding.
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            time_embed_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "denoiser: hidden must be positive and time_embed_dim a positive even number"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in `z_t` at step `t`.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_noise(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self(z_t, t)
    }
}

/// Two-layer MLP with a linear skip from `z_t` to the output:
///
/// ```text
/// h₁ = silu(z W₁ + emb(t) W_t + b₁)
/// h₂ = silu(h₁ W₂ + b₂)
/// ε̂  = h₂ W_out + b_out + z W_skip
/// ```
#[derive(Clone, Debug)]
pub struct Denoiser {
    steps: usize,
    time_embed_dim: usize,
    input: Linear,
    time: Linear,
    hidden: Linear,
    output: Linear,
    skip: Linear,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &DenoiserConfig,
        latent_dim: usize,
        steps: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Denoiser;
        let h = cfg.hidden;
        let skip = Linear::new(store, "denoiser.skip", g, latent_dim, latent_dim, rng);
        Self {
            steps,
            time_embed_dim: cfg.time_embed_dim,
            input: Linear::new(store, "denoiser.input", g, latent_dim, h, rng),
            time: Linear::new(store, "denoiser.time", g, cfg.time_embed_dim, h, rng),
            hidden: Linear::new(store, "denoiser.hidden", g, h, h, rng),
            output: Linear::new(store, "denoiser.output", g, h, latent_dim, rng),
            skip,
        }
    }

    pub fn output(&self) -> &Linear {
        &self.output
    }

    pub fn skip(&self) -> &Linear {
        &self.skip
    }

    /// Sinusoidal embedding of each step, one row per entry of `steps`.
    /// The step is normalized to `t/T` and spread over frequencies
    /// `1000·10000^(−2i/dim)`.
    pub fn time_embedding(&self, steps: &[usize]) -> Tensor {
        let half = self.time_embed_dim / 2;
        let mut out = Tensor::zeros(steps.len(), self.time_embed_dim);
        for (r, &t) in steps.iter().enumerate() {
            let x = 1000.0 * t as f64 / self.steps as f64;
            let row = out.row_mut(r);
            for i in 0..half {
                let freq = 10000f64.powf(-(i as f64) / half as f64);
                row[i] = (x * freq).sin();
                row[half + i] = (x * freq).cos();
            }
        }
        out
    }

    /// ε̂ for the rows of `z` (`n x d`) at the per-row steps `steps`.
    pub fn forward(&self, tape: &mut Tape<'_>, z: Var, steps: &[usize]) -> Var {
        let emb = tape.constant(self.time_embedding(steps));
        let a = self.input.forward(tape, z);
        let b = self.time.forward(tape, emb);
        let h = tape.add(a, b);
        let h = tape.silu(h);
        let h = self.hidden.forward(tape, h);
        let h = tape.silu(h);
        let out = self.output.forward(tape, h);
        let skip = self.skip.forward(tape, z);
        tape.add(out, skip)
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundDenoiser<'a> {
        BoundDenoiser { net: self, store }
    }
}

/// A denoiser paired with the parameter values it should use.
#[derive(Clone, Copy)]
pub struct BoundDenoiser<'a> {
    net: &'a Denoiser,
    store: &'a ParamStore,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict_noise(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.net.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.net.steps,
            });
        }
        let mut tape = Tape::new(self.store);
        let z = tape.constant(z_t.clone());
        let eps = self.net.forward(&mut tape, z, &vec![t; z_t.rows()]);
        let out = tape.value(eps).clone();
        ensure_finite(&out, "denoiser")?;
        Ok(out)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `a·x + b·y`, elementwise.
fn affine(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(x, y)| a * x + b * y)
        .collect();
    Tensor::from_vec(x.rows(), x.cols(), data)
}

/// One forward step: z_t = √(1−β_t)·z_{t−1} + √β_t·noise, for `2 ≤ t ≤ T`.
pub fn forward_step(
    z_prev: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    if t < 2 || t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            step: t,
            max: schedule.steps(),
        });
    }
    check_same_shape(z_prev, noise)?;
    let beta = schedule.beta(t);
    Ok(affine((1.0 - beta).sqrt(), z_prev, beta.sqrt(), noise))
}

/// Closed-form draw z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·noise, for `1 ≤ t ≤ T`.
pub fn marginal_sample(
    z0: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    check_same_shape(z0, noise)?;
    let ab = schedule.alpha_bar(t);
    Ok(affine(ab.sqrt(), z0, (1.0 - ab).sqrt(), noise))
}

/// u = (z_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t for a given noise prediction.
pub fn reverse_mean_from_eps(
    z_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &Tensor,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    check_same_shape(z_t, eps)?;
    let one_minus = 1.0 - schedule.alpha_bar(t);
    if one_minus <= 0.0 {
        return Err(Error::DegenerateSchedule(t));
    }
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = schedule.beta(t) / one_minus.sqrt();
    Ok(affine(inv_sqrt_alpha, z_t, -inv_sqrt_alpha * coef, eps))
}

pub fn reverse_mean(
    z_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    let eps = predictor.predict_noise(z_t, t)?;
    reverse_mean_from_eps(z_t, t, schedule, &eps)
}

/// z_{t−1} = u(z_t, t) + √β_t·noise. At `t = 1` the mean is returned and
/// `noise` is ignored.
pub fn reverse_step(
    z_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    noise: &Tensor,
) -> Result<Tensor> {
    let mean = reverse_mean(z_t, t, schedule, predictor)?;
    if t == 1 {
        return Ok(mean);
    }
    check_same_shape(&mean, noise)?;
    Ok(affine(1.0, &mean, schedule.beta(t).sqrt(), noise))
}

/// Runs the reverse chain from `z_T` down to z₁ with explicit draws:
/// `noises[k]` is used by the step at `t = T − k`, so `T − 1` draws are
/// needed.
pub fn ancestral_sample_from(
    z_last: Tensor,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    noises: &[Tensor],
) -> Result<Tensor> {
    let steps = schedule.steps();
    if noises.len() != steps - 1 {
        return Err(Error::ShapeMismatch(format!(
            "reverse chain of {steps} steps needs {} noise draws, got {}",
            steps - 1,
            noises.len()
        )));
    }
    let mut z = z_last;
    for (k, noise) in noises.iter().enumerate() {
        z = reverse_step(&z, steps - k, schedule, predictor, noise)?;
    }
    Ok(z)
}

/// Draws `count` latents z₁ by sampling z_T ~ N(0, I) and running the
/// reverse chain.
pub fn ancestral_sample<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    count: usize,
    latent_dim: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let z_last = standard_normal(count, latent_dim, rng);
    let noises: Vec<Tensor> = (1..schedule.steps())
        .map(|_| standard_normal(count, latent_dim, rng))
        .collect();
    ancestral_sample_from(z_last, schedule, predictor, &noises)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_vec(rows, cols, data)
}
