//! Numerical self-checks: schedule algebra, chain/marginal agreement,
//! reverse-step algebra, the prior KL, likelihood normalization and
//! gradients. Each returns the measured error next to its tolerance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decoder::{log_likelihood, Decoder, DecoderConfig};
use crate::diffusion::{forward_step, reverse_mean, reverse_step, standard_normal, DenoiserConfig};
use crate::encoder::sample_z1;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::molgraph::{GraphBatch, MolecularGraph};
use crate::nn::TransformerConfig;
use crate::objective::{evaluate, prior_kl_closed_form, ElboDraws, Objective};
use crate::par::Execution;
use crate::params::{ParamGroup, ParamStore};
use crate::property_head::HeadConfig;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;

/// ᾱ_T of the 1000-step linear schedule from 1e-4 to 0.02, evaluated with
/// 50-digit arithmetic.
pub const LINEAR_1000_ALPHA_BAR_T: f64 = 4.035_829_765_375_683_3e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Largest relative gap between the stored ᾱ table and a fresh left fold
/// of `(1 − β)` for every step.
pub fn alpha_bar_fold_error(schedule: &NoiseSchedule) -> f64 {
    let betas = schedule.betas();
    (1..=betas.len())
        .map(|t| {
            let fold = betas[..t].iter().fold(1.0, |acc, b| acc * (1.0 - b));
            rel(schedule.alpha_bar(t), fold)
        })
        .fold(0.0, f64::max)
}

pub fn schedule_fold(schedule: &NoiseSchedule) -> CheckOutcome {
    CheckOutcome::new(
        format!("schedule product (T={})", schedule.steps()),
        alpha_bar_fold_error(schedule),
        1e-12,
    )
}

pub fn schedule_high_precision() -> Result<CheckOutcome> {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    Ok(CheckOutcome::new(
        "alpha_bar_T of linear(1e-4, 0.02, 1000) vs 50-digit value",
        rel(s.prior_convergence_gap(), LINEAR_1000_ALPHA_BAR_T),
        5e-6,
    ))
}

/// Zero-noise forward chain from z₀ against √ᾱ_t·z₀ at every step.
pub fn chain_zero_noise(schedule: &NoiseSchedule, latent_dim: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let z0 = standard_normal(3, latent_dim, &mut rng);
    let zero = Tensor::zeros(3, latent_dim);
    let mut z = sample_z1(&z0, schedule, &zero)?;
    let mut worst: f64 = 0.0;
    for t in 1..=schedule.steps() {
        if t > 1 {
            z = forward_step(&z, t, schedule, &zero)?;
        }
        let expect = z0.scale(schedule.alpha_bar(t).sqrt());
        for (a, b) in z.data().iter().zip(expect.data()) {
            worst = worst.max(rel(*a, *b));
        }
    }
    Ok(CheckOutcome::new(
        "zero-noise chain vs closed-form marginal",
        worst,
        1e-10,
    ))
}

/// Variance of the iterated chain at step `t` against 1 − ᾱ_t, per
/// coordinate, over `samples` draws.
pub fn chain_variance(
    schedule: &NoiseSchedule,
    t: usize,
    latent_dim: usize,
    samples: usize,
) -> Result<CheckOutcome> {
    schedule.check_step(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let z0 = Tensor::from_vec(
        1,
        latent_dim,
        (0..latent_dim).map(|i| 0.5 * i as f64 - 0.7).collect(),
    );
    let z0s = Tensor::from_vec(
        samples,
        latent_dim,
        (0..samples).flat_map(|_| z0.data().to_vec()).collect(),
    );
    let mut z = sample_z1(
        &z0s,
        schedule,
        &standard_normal(samples, latent_dim, &mut rng),
    )?;
    for s in 2..=t {
        z = forward_step(
            &z,
            s,
            schedule,
            &standard_normal(samples, latent_dim, &mut rng),
        )?;
    }
    let target = 1.0 - schedule.alpha_bar(t);
    let mean_target = z0.scale(schedule.alpha_bar(t).sqrt());
    let mut worst: f64 = 0.0;
    for c in 0..latent_dim {
        let mean_ref = mean_target.data()[c];
        let var = (0..samples)
            .map(|r| (z.get(r, c) - mean_ref).powi(2))
            .sum::<f64>()
            / samples as f64;
        worst = worst.max(rel(var, target));
    }
    Ok(CheckOutcome::new(
        format!("chain variance at t={t} vs 1 - alpha_bar (N={samples})"),
        worst,
        0.02,
    ))
}

/// With ε_w ≡ 0 the reverse mean must be z_t/√α_t at every step.
pub fn reverse_zero_predictor(schedule: &NoiseSchedule, latent_dim: usize) -> Result<CheckOutcome> {
    let zero = |z: &Tensor, _: usize| Ok(Tensor::zeros(z.rows(), z.cols()));
    let z = standard_normal(2, latent_dim, &mut ChaCha8Rng::seed_from_u64(303));
    let mut worst: f64 = 0.0;
    for t in 1..=schedule.steps() {
        let u = reverse_mean(&z, t, schedule, &zero)?;
        let s = 1.0 / schedule.alpha(t).sqrt();
        for (a, b) in u.data().iter().zip(z.data()) {
            worst = worst.max(rel(*a, b * s));
        }
    }
    Ok(CheckOutcome::new(
        "reverse mean with zero noise prediction",
        worst,
        1e-12,
    ))
}

/// Variance of reverse draws about their mean against β_t.
pub fn reverse_variance(
    schedule: &NoiseSchedule,
    t: usize,
    latent_dim: usize,
    samples: usize,
) -> Result<CheckOutcome> {
    let predictor = |z: &Tensor, _: usize| Ok(z.scale(0.3));
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let z = Tensor::from_vec(
        samples,
        latent_dim,
        (0..samples)
            .flat_map(|_| (0..latent_dim).map(|i| 0.2 * i as f64 + 0.1))
            .collect(),
    );
    let mean = reverse_mean(&z, t, schedule, &predictor)?;
    let draws = reverse_step(
        &z,
        t,
        schedule,
        &predictor,
        &standard_normal(samples, latent_dim, &mut rng),
    )?;
    let target = schedule.beta(t);
    let mut worst: f64 = 0.0;
    for c in 0..latent_dim {
        let var = (0..samples)
            .map(|r| (draws.get(r, c) - mean.get(r, c)).powi(2))
            .sum::<f64>()
            / samples as f64;
        worst = worst.max(rel(var, target));
    }
    Ok(CheckOutcome::new(
        format!("reverse-step variance at t={t} vs beta_t (N={samples})"),
        worst,
        0.02,
    ))
}

/// Closed-form prior KL against a density-ratio Monte-Carlo estimate for
/// `cases` random z₀ with entries in [−3, 3].
pub fn prior_kl_monte_carlo(
    schedule: &NoiseSchedule,
    latent_dim: usize,
    cases: usize,
    samples: usize,
) -> Result<CheckOutcome> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let ab = schedule.prior_convergence_gap();
    let var = 1.0 - ab;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let z0 = Tensor::from_vec(
            1,
            latent_dim,
            (0..latent_dim)
                .map(|_| rng.random_range(-3.0..=3.0))
                .collect(),
        );
        let closed = prior_kl_closed_form(&z0, schedule)?[0];
        let mut total = 0.0;
        for _ in 0..samples {
            let mut log_ratio = 0.0;
            for &z in z0.data() {
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = ab.sqrt() * z + var.sqrt() * e;
                // log q(x) − log p(x), per coordinate
                log_ratio += -0.5 * var.ln() - 0.5 * e * e + 0.5 * x * x;
            }
            total += log_ratio;
        }
        worst = worst.max(rel(total / samples as f64, closed));
    }
    Ok(CheckOutcome::new(
        format!("prior KL closed form vs Monte Carlo ({cases} cases, N={samples})"),
        worst,
        0.01,
    ))
}

/// Sum of exp(log-likelihood) over every 2-node graph with 2 atom and
/// 2 bond categories, for `draws` random decoders.
pub fn likelihood_normalization(draws: usize) -> Result<CheckOutcome> {
    let cfg = DecoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 4,
        ff_width: 8,
        dropout: 0.0,
    };
    let mut truths = Vec::new();
    for a in 0..2 {
        for b in 0..2 {
            for e in 0..2 {
                truths.push(MolecularGraph::new(vec![a, b], vec![0, e, e, 0])?);
            }
        }
    }
    let batch = GraphBatch::new(&truths, 2, 2, 2)?;
    let mut worst: f64 = 0.0;
    for seed in 0..draws as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &cfg, 3, 2, 2, 2, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v += 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
        let z = standard_normal(1, 3, &mut rng);
        let z8 = Tensor::from_vec(8, 3, (0..8).flat_map(|_| z.data().to_vec()).collect());
        let logits = dec.decode_logits(&store, &z8, &[2; 8], Execution::Sequential)?;
        let total: f64 = log_likelihood(&logits, &batch)?
            .iter()
            .map(|l| l.exp())
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    Ok(CheckOutcome::new(
        format!("likelihood sums to 1 over all 2-node graphs ({draws} decoders)"),
        worst,
        1e-10,
    ))
}

/// Small model used by the gradient check: latent width 4, 3 diffusion
/// steps.
pub fn gradient_check_config() -> ModelConfig {
    let t = TransformerConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        ff_width: 8,
        dropout: 0.0,
    };
    ModelConfig {
        max_nodes: 4,
        latent_dim: 4,
        encoder: t.clone(),
        decoder: t,
        denoiser: DenoiserConfig {
            hidden: 6,
            time_embed_dim: 4,
        },
        head: HeadConfig { hidden: 4 },
        schedule: ScheduleConfig {
            steps: 3,
            beta_start: 0.1,
            beta_end: 0.3,
        },
        ..ModelConfig::default()
    }
}

/// Relative error ‖g − g_fd‖ / ‖g_fd‖ of the analytic loss gradient
/// against central differences (step `h`), one entry per parameter group.
pub fn gradient_errors(
    model: &Model,
    graphs: &[MolecularGraph],
    draws: &ElboDraws,
    objective: Objective<'_>,
    h: f64,
) -> Result<Vec<(ParamGroup, f64)>> {
    let loss = |store: &ParamStore, grad: bool| {
        evaluate(
            &model.nets,
            store,
            &model.schedule,
            graphs,
            draws,
            objective,
            0.0,
            Execution::Sequential,
            grad,
        )
    };
    let (_, grads) = loss(&model.store, true)?;
    let grads = grads.expect("gradients requested");
    let mut out = Vec::new();
    for group in ParamGroup::ALL {
        let analytic = grads.flatten_group(&model.store, group);
        if analytic.is_empty() {
            continue;
        }
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = model.store.clone();
        for id in model
            .store
            .ids()
            .filter(|&id| model.store.entry(id).group == group)
        {
            for k in 0..model.store.get(id).len() {
                let orig = probe.get(id).data()[k];
                probe.get_mut(id).data_mut()[k] = orig + h;
                let plus = loss(&probe, false)?.0.loss;
                probe.get_mut(id).data_mut()[k] = orig - h;
                let minus = loss(&probe, false)?.0.loss;
                probe.get_mut(id).data_mut()[k] = orig;
                numeric.push((plus - minus) / (2.0 * h));
            }
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push((group, diff / norm.max(1e-12)));
    }
    Ok(out)
}

/// Full-objective gradient check on a 2-atom molecule: −elbo plus a
/// squared-error term so that the regression head is covered too.
pub fn gradient_check() -> Result<Vec<CheckOutcome>> {
    let mut model = Model::new(gradient_check_config(), 17)?;
    // Move every parameter off its initial value so zero-initialized
    // tables and unit gains are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.get_mut(id).data_mut() {
            *v += 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let graphs = vec![model.codec.parse("C=O")?];
    let draws = ElboDraws::sample(&mut rng, 1, model.latent_dim(), model.schedule.steps());
    let objective = Objective::Finetune {
        targets: &[0.7],
        lambda: 1.0,
    };
    Ok(gradient_errors(&model, &graphs, &draws, objective, 1e-5)?
        .into_iter()
        .map(|(g, err)| {
            CheckOutcome::new(
                format!("loss gradient vs finite differences ({})", g.name()),
                err,
                1e-4,
            )
        })
        .collect())
}

/// Every check, using `schedule` for the chain and reverse algebra.
pub fn run_all(schedule: &NoiseSchedule) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![schedule_fold(schedule)];
    for t in [1, 2, 50, 1000] {
        out.push(schedule_fold(&NoiseSchedule::linear(t, 1e-4, 0.02)?));
    }
    out.push(schedule_high_precision()?);
    out.push(chain_zero_noise(schedule, 4)?);
    let t = schedule.steps().min(5);
    out.push(chain_variance(schedule, t, 4, 100_000)?);
    out.push(reverse_zero_predictor(schedule, 4)?);
    if schedule.steps() >= 2 {
        out.push(reverse_variance(schedule, schedule.steps(), 4, 100_000)?);
    }
    out.push(prior_kl_monte_carlo(schedule, 4, 20, 1_000_000)?);
    out.push(likelihood_normalization(100)?);
    out.extend(gradient_check()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_table_fails_the_fold_check() {
        let mut s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(schedule_fold(&s).passed);
        s.corrupt_alpha_bar_for_test(4, 0.5);
        assert!(!schedule_fold(&s).passed);
    }

    #[test]
    fn algebraic_checks_pass() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        assert!(schedule_high_precision().unwrap().passed);
        assert!(chain_zero_noise(&s, 4).unwrap().passed);
        assert!(reverse_zero_predictor(&s, 4).unwrap().passed);
        assert!(likelihood_normalization(5).unwrap().passed);
    }
}
