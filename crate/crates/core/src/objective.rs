//! The three-term ELBO, its fine-tuning variant, and the optimizer step.
//!
//! Each graph in a batch is evaluated on its own tape; per-graph gradients
//! are summed in batch order, so sequential and parallel execution give
//! bit-identical results.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::log_likelihood_on_tape;
use crate::diffusion::{marginal_sample, standard_normal, NoisePredictor};
use crate::error::{Error, Result};
use crate::model::{Model, Networks};
use crate::molgraph::MolecularGraph;
use crate::nn::Dropout;
use crate::par::{self, Execution};
use crate::params::{Gradients, ParamGroup, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Batch means of the ELBO terms; `elbo = recon − prior_kl − denoise`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub prior_kl: f64,
    pub denoise: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn new(recon: f64, prior_kl: f64, denoise: f64) -> Self {
        Self {
            recon,
            prior_kl,
            denoise,
            elbo: recon - prior_kl - denoise,
        }
    }
}

/// Every random input of one objective evaluation, one row per graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboDraws {
    /// Noise of the reparameterized z₁ draw.
    pub z1_noise: Tensor,
    /// Diffusion step of the denoising term, in `1..=T`.
    pub steps: Vec<usize>,
    /// Noise injected at that step.
    pub eps: Tensor,
    pub dropout_seed: u64,
}

impl ElboDraws {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        batch: usize,
        latent_dim: usize,
        steps: usize,
    ) -> Self {
        let z1_noise = standard_normal(batch, latent_dim, rng);
        let t = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
        let eps = standard_normal(batch, latent_dim, rng);
        Self {
            z1_noise,
            steps: t,
            eps,
            dropout_seed: rng.random(),
        }
    }

    /// All-zero noise at a fixed step.
    pub fn zeros(batch: usize, latent_dim: usize, step: usize) -> Self {
        Self {
            z1_noise: Tensor::zeros(batch, latent_dim),
            steps: vec![step; batch],
            eps: Tensor::zeros(batch, latent_dim),
            dropout_seed: 0,
        }
    }

    fn check(&self, batch: usize, latent_dim: usize, schedule: &NoiseSchedule) -> Result<()> {
        if self.z1_noise.shape() != (batch, latent_dim)
            || self.eps.shape() != (batch, latent_dim)
            || self.steps.len() != batch
        {
            return Err(Error::ShapeMismatch(format!(
                "draws for {} graphs of width {} do not fit a batch of {batch} with latent width {latent_dim}",
                self.steps.len(),
                self.z1_noise.cols()
            )));
        }
        for &t in &self.steps {
            schedule.check_step(t)?;
        }
        Ok(())
    }
}

/// What the scalar loss is made of.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// −elbo
    Elbo,
    /// −elbo + λ·mean((ŷ − y)²), with ŷ read from the same z₁ draw the
    /// decoder sees.
    Finetune { targets: &'a [f64], lambda: f64 },
    /// mean((ŷ − y)²) alone; decoder and denoiser are not evaluated.
    Regression { targets: &'a [f64] },
}

impl Objective<'_> {
    fn uses_elbo(&self) -> bool {
        !matches!(self, Objective::Regression { .. })
    }

    fn targets(&self) -> Option<&[f64]> {
        match self {
            Objective::Elbo => None,
            Objective::Finetune { targets, .. } | Objective::Regression { targets } => {
                Some(targets)
            }
        }
    }

    fn mse_weight(&self) -> f64 {
        match self {
            Objective::Elbo => 0.0,
            Objective::Finetune { lambda, .. } => *lambda,
            Objective::Regression { .. } => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Zero in [`Objective::Regression`] mode.
    pub breakdown: ElboBreakdown,
    pub mse: Option<f64>,
    pub loss: f64,
}

/// ½ Σᵢ [ᾱ_T z₀ᵢ² − ᾱ_T − ln(1−ᾱ_T)] per row: the KL from
/// N(√ᾱ_T z₀, (1−ᾱ_T) I) to N(0, I).
pub fn prior_kl_closed_form(z0: &Tensor, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let (ab, constant) = prior_kl_coefficients(schedule)?;
    Ok((0..z0.rows())
        .map(|r| {
            0.5 * ab * z0.row(r).iter().map(|v| v * v).sum::<f64>() + constant * z0.cols() as f64
        })
        .collect())
}

/// (ᾱ_T, per-coordinate constant ½(−ᾱ_T − ln(1−ᾱ_T))).
fn prior_kl_coefficients(schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    let ab = schedule.prior_convergence_gap();
    let rest = 1.0 - ab;
    if rest <= 0.0 {
        return Err(Error::DegenerateSchedule(schedule.steps()));
    }
    Ok((ab, 0.5 * (-ab - rest.ln())))
}

/// Batch mean of ‖ε − ε_w(z_t, t)‖² with z_t drawn from the closed-form
/// marginal at each row's step.
pub fn denoise_term(
    z0: &Tensor,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    steps: &[usize],
    noise: &Tensor,
) -> Result<f64> {
    if steps.len() != z0.rows() || noise.shape() != z0.shape() {
        return Err(Error::ShapeMismatch(
            "one step and one noise row per latent row".into(),
        ));
    }
    if z0.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, &t) in steps.iter().enumerate() {
        let eps = noise.row_tensor(r);
        let z_t = marginal_sample(&z0.row_tensor(r), t, schedule, &eps)?;
        let pred = predictor.predict_noise(&z_t, t)?;
        total += eps
            .data()
            .iter()
            .zip(pred.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / z0.rows() as f64)
}

struct GraphTerms {
    recon: f64,
    prior_kl: f64,
    denoise: f64,
    sq_err: f64,
    loss: f64,
    grads: Option<Gradients>,
}

/// `a·x + b·c` on the tape, where `c` is a constant row.
fn affine_const(tape: &mut Tape<'_>, a: f64, x: Var, b: f64, c: Tensor) -> Var {
    let scaled = tape.scale(x, a);
    let c = tape.constant(c.scale(b));
    tape.add(scaled, c)
}

#[allow(clippy::too_many_arguments)]
fn graph_terms(
    nets: &Networks,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    graph: &MolecularGraph,
    b: usize,
    draws: &ElboDraws,
    objective: Objective<'_>,
    dropout_rate: f64,
    with_grad: bool,
) -> Result<GraphTerms> {
    let mut tape = Tape::new(store);
    let seed = draws.dropout_seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut dropout = Dropout::new(dropout_rate, seed);
    let z0 = nets.encoder.forward(&mut tape, graph, dropout.as_mut())?;
    let beta1 = schedule.beta(1);
    let z1 = affine_const(
        &mut tape,
        (1.0 - beta1).sqrt(),
        z0,
        beta1.sqrt(),
        draws.z1_noise.row_tensor(b),
    );

    let mut loss = tape.constant(Tensor::zeros(1, 1));
    let (mut recon, mut prior_kl, mut denoise, mut sq_err) = (0.0, 0.0, 0.0, 0.0);
    if objective.uses_elbo() {
        let logits = nets.decoder.forward(&mut tape, z1, graph.num_nodes())?;
        let ll = log_likelihood_on_tape(&mut tape, &logits, graph);

        let (ab_last, constant) = prior_kl_coefficients(schedule)?;
        let sq = tape.mul(z0, z0);
        let sq = tape.sum_all(sq);
        let sq = tape.scale(sq, 0.5 * ab_last);
        let width = tape.value(z0).cols() as f64;
        let kl = tape.add_const(sq, constant * width);

        let t = draws.steps[b];
        let ab = schedule.alpha_bar(t);
        let eps = draws.eps.row_tensor(b);
        let z_t = affine_const(&mut tape, ab.sqrt(), z0, (1.0 - ab).sqrt(), eps.clone());
        let eps_hat = nets.denoiser.forward(&mut tape, z_t, &[t]);
        let eps = tape.constant(eps);
        let diff = tape.sub(eps, eps_hat);
        let sq = tape.mul(diff, diff);
        let den = tape.sum_all(sq);

        let neg_ll = tape.scale(ll, -1.0);
        let penalties = tape.add(kl, den);
        loss = tape.add(neg_ll, penalties);
        recon = tape.scalar(ll);
        prior_kl = tape.scalar(kl);
        denoise = tape.scalar(den);
    }
    if let Some(targets) = objective.targets() {
        let pred = nets.head.forward(&mut tape, z1);
        let target = tape.constant(Tensor::from_vec(1, 1, vec![targets[b]]));
        let diff = tape.sub(pred, target);
        let sq = tape.mul(diff, diff);
        sq_err = tape.scalar(sq);
        let weighted = tape.scale(sq, objective.mse_weight());
        loss = tape.add(loss, weighted);
    }
    let loss_value = tape.scalar(loss);
    let grads = with_grad.then(|| tape.backward(loss));
    Ok(GraphTerms {
        recon,
        prior_kl,
        denoise,
        sq_err,
        loss: loss_value,
        grads,
    })
}

/// Evaluates the batch-mean loss (and its gradient when `with_grad`).
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    nets: &Networks,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    graphs: &[MolecularGraph],
    draws: &ElboDraws,
    objective: Objective<'_>,
    dropout_rate: f64,
    exec: Execution,
    with_grad: bool,
) -> Result<(LossReport, Option<Gradients>)> {
    if graphs.is_empty() {
        return Err(Error::EmptySplit);
    }
    let latent_dim = store.get(nets.encoder.project().bias).cols();
    draws.check(graphs.len(), latent_dim, schedule)?;
    if let Some(targets) = objective.targets() {
        if targets.len() != graphs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} graphs",
                targets.len(),
                graphs.len()
            )));
        }
    }
    let terms = par::try_map_range(exec, graphs.len(), |b| {
        graph_terms(
            nets,
            store,
            schedule,
            &graphs[b],
            b,
            draws,
            objective,
            dropout_rate,
            with_grad,
        )
    })?;

    let n = graphs.len() as f64;
    let mean = |f: fn(&GraphTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
    let breakdown =
        ElboBreakdown::new(mean(|g| g.recon), mean(|g| g.prior_kl), mean(|g| g.denoise));
    let report = LossReport {
        breakdown,
        mse: objective.targets().map(|_| mean(|g| g.sq_err)),
        loss: mean(|g| g.loss),
    };
    let grads = with_grad.then(|| {
        let mut total = Gradients::zeros_like(store);
        for g in &terms {
            total.accumulate(g.grads.as_ref().expect("requested gradients"), 1.0 / n);
        }
        total
    });
    Ok((report, grads))
}

/// The ELBO of a batch under fixed draws.
pub fn elbo(
    model: &Model,
    graphs: &[MolecularGraph],
    draws: &ElboDraws,
    exec: Execution,
) -> Result<ElboBreakdown> {
    let (report, _) = evaluate(
        &model.nets,
        &model.store,
        &model.schedule,
        graphs,
        draws,
        Objective::Elbo,
        0.0,
        exec,
        false,
    )?;
    Ok(report.breakdown)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 5000,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidConfig(
                "beta1 and beta2 must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.rows(), e.tensor.cols()))
                .collect()
        };
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Descends along `grads` for parameters in `groups`; other groups are
    /// left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, groups: &[ParamGroup]) {
        self.step = self.step.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for id in store.ids().collect::<Vec<_>>() {
            if !groups.contains(&store.entry(id).group) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub report: LossReport,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer step on `graphs`. The returned report describes the
/// parameters before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    graphs: &[MolecularGraph],
    draws: &ElboDraws,
    objective: Objective<'_>,
    cfg: &TrainConfig,
    groups: &[ParamGroup],
    step: usize,
    exec: Execution,
) -> Result<StepReport> {
    let dropout = model.config.encoder.dropout;
    let (report, grads) = evaluate(
        &model.nets,
        &model.store,
        &model.schedule,
        graphs,
        draws,
        objective,
        dropout,
        exec,
        true,
    )?;
    let mut grads = grads.expect("gradients requested");
    if !report.loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFiniteGradient {
            step,
            loss: report.loss,
        });
    }
    let grad_norm = grads.clip_global_norm(cfg.grad_clip);
    optimizer.update(&mut model.store, &grads, groups);
    Ok(StepReport { report, grad_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;
    use crate::model::ModelConfig;
    use crate::nn::TransformerConfig;
    use crate::property_head::HeadConfig;
    use crate::schedule::ScheduleConfig;
    use crate::smiles::parse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        let t = TransformerConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            ff_width: 8,
            dropout: 0.0,
        };
        ModelConfig {
            max_nodes: 6,
            latent_dim: 4,
            encoder: t.clone(),
            decoder: t,
            denoiser: DenoiserConfig {
                hidden: 8,
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

    #[test]
    fn kl_substitution() {
        let s = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        let kl = prior_kl_closed_form(&Tensor::zeros(1, 1), &s).unwrap();
        let expect = 0.5 * (-0.5 - 0.5f64.ln());
        assert!((kl[0] - expect).abs() < 1e-15);
        assert!((kl[0] - 0.096_573_590_279_972_65).abs() < 1e-12);
    }

    #[test]
    fn kl_vanishes_when_signal_is_gone() {
        let s = NoiseSchedule::linear(400, 0.5, 0.5).unwrap();
        let z0 = Tensor::row_vector(vec![3.0, -3.0, 1.0]);
        assert!(prior_kl_closed_form(&z0, &s).unwrap()[0].abs() < 1e-100);
    }

    #[test]
    fn denoise_term_limits() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        let z0 = Tensor::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
        let noise = Tensor::from_vec(2, 2, vec![0.3, -0.4, 1.0, 2.0]);
        let zero = |z: &Tensor, _: usize| Ok(Tensor::zeros(z.rows(), z.cols()));
        let v = denoise_term(&z0, &s, &zero, &[1, 4], &noise).unwrap();
        assert!((v - (0.25 + 5.0) / 2.0).abs() < 1e-12);

        // A predictor that recovers the injected noise exactly from z_t.
        let oracle = |row: usize| {
            let z0 = z0.clone();
            let s = s.clone();
            move |z: &Tensor, t: usize| {
                let ab = s.alpha_bar(t);
                let mean = z0.row_tensor(row).scale(ab.sqrt());
                let resid = z.add(&mean.scale(-1.0));
                Ok(resid.scale(1.0 / (1.0 - ab).sqrt()))
            }
        };
        for r in 0..2 {
            let one = denoise_term(
                &z0.row_tensor(r),
                &s,
                &oracle(r),
                &[3],
                &noise.row_tensor(r),
            )
            .unwrap();
            assert!(one < 1e-24);
        }
    }

    #[test]
    fn elbo_bounds_hold() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let graphs = vec![parse("CO").unwrap(), parse("C=CN").unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = ElboDraws::sample(&mut rng, 2, 4, 3);
        let b = elbo(&model, &graphs, &draws, Execution::Sequential).unwrap();
        assert!(b.prior_kl >= 0.0 && b.denoise >= 0.0);
        assert!(b.elbo <= b.recon && b.recon <= 0.0);
        assert_eq!(
            b,
            elbo(&model, &graphs, &draws, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn lambda_zero_reduces_to_pretraining_loss() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let graphs = vec![parse("CO").unwrap(), parse("CCC").unwrap()];
        let draws = ElboDraws::sample(&mut ChaCha8Rng::seed_from_u64(4), 2, 4, 3);
        let run = |objective| {
            evaluate(
                &model.nets,
                &model.store,
                &model.schedule,
                &graphs,
                &draws,
                objective,
                0.0,
                Execution::Sequential,
                true,
            )
            .unwrap()
        };
        let (plain, g_plain) = run(Objective::Elbo);
        let (tuned, g_tuned) = run(Objective::Finetune {
            targets: &[1.0, -2.0],
            lambda: 0.0,
        });
        assert_eq!(plain.loss, tuned.loss);
        assert_eq!(plain.loss, -plain.breakdown.elbo);
        let (a, b) = (g_plain.unwrap(), g_tuned.unwrap());
        for group in [
            ParamGroup::Encoder,
            ParamGroup::Decoder,
            ParamGroup::Denoiser,
        ] {
            assert_eq!(
                a.flatten_group(&model.store, group),
                b.flatten_group(&model.store, group)
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut model = Model::new(tiny_config(), 1).unwrap();
        let before = model.store.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&model.store, &cfg);
        let graphs = vec![parse("CO").unwrap()];
        let draws = ElboDraws::sample(&mut ChaCha8Rng::seed_from_u64(5), 1, 4, 3);
        let r = train_step(
            &mut model,
            &mut opt,
            &graphs,
            &draws,
            Objective::Elbo,
            &cfg,
            &ParamGroup::ALL,
            0,
            Execution::Sequential,
        )
        .unwrap();
        assert!(r.report.loss.is_finite());
        for (a, b) in before.entries().iter().zip(model.store.entries()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let mut model = Model::new(tiny_config(), 1).unwrap();
        let before = model.store.clone();
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(&model.store, &cfg);
        let graphs = vec![parse("CO").unwrap()];
        let draws = ElboDraws::sample(&mut ChaCha8Rng::seed_from_u64(5), 1, 4, 3);
        let objective = Objective::Finetune {
            targets: &[0.5],
            lambda: 1.0,
        };
        train_step(
            &mut model,
            &mut opt,
            &graphs,
            &draws,
            objective,
            &cfg,
            &[ParamGroup::Head],
            0,
            Execution::Sequential,
        )
        .unwrap();
        for (a, b) in before.entries().iter().zip(model.store.entries()) {
            if a.group == ParamGroup::Head {
                assert_ne!(a.tensor, b.tensor, "{}", a.name);
            } else {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            }
        }
    }

    #[test]
    fn mismatched_draws_are_rejected() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let graphs = vec![parse("CO").unwrap()];
        let draws = ElboDraws::zeros(2, 4, 1);
        assert!(elbo(&model, &graphs, &draws, Execution::Sequential).is_err());
        let draws = ElboDraws::zeros(1, 4, 9);
        assert!(elbo(&model, &graphs, &draws, Execution::Sequential).is_err());
    }
}
