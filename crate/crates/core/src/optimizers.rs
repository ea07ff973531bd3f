//! Training-step algebra for the plain, re-weighted, SAM, GroupSAM and EISAM
//! variants, on top of SGD or Adam.
//!
//! EISAM per step, on one batch:
//!
//! ```text
//! g_w  = ∇L_B^w(θ)                      (shares the forward pass with ∇L_B)
//! ε̂    = ρ g_w / ‖g_w‖₂
//! g₁   = ∇L_B^w(θ + ε̂)
//! g₂   = ∇L_B(θ) − λ g_w
//! θ'   = base_update(θ, λ g₁ + g₂)
//! ```
//!
//! `L_B^w` is the minibatch estimate of `Σ_i f(q_i) L^(i)`; see [`Estimator`].

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::SequenceDataset;
use crate::model::{l2_norm, Batch, LossModel};
use crate::rng::{stream_rng, STREAM_SHUFFLE_BASE};
use crate::weighting::{ItemWeights, Normalize, WeightingScheme};
use crate::{Error, Result};

/// Gradient norms below this make the ascent direction undefined.
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Plain,
    #[serde(rename = "RW")]
    Rw,
    #[serde(rename = "SAM")]
    Sam,
    GroupSAM,
    #[serde(rename = "EISAM")]
    Eisam,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Plain,
        Variant::Rw,
        Variant::Sam,
        Variant::GroupSAM,
        Variant::Eisam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Plain => "Plain",
            Variant::Rw => "RW",
            Variant::Sam => "SAM",
            Variant::GroupSAM => "GroupSAM",
            Variant::Eisam => "EISAM",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown optimizer variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseOptimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl BaseOptimizer {
    pub fn adam() -> Self {
        BaseOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How `L^w` is estimated on a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Per-example weight `f(q_i)/q_i`, batch mean. Unbiased for
    /// `Σ_i f(q_i) L^(i)` under uniform sampling.
    #[default]
    Unbiased,
    /// `Σ_{i in batch} f(q_i) · mean_{k: i_k = i} ℓ_k`.
    Grouped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub variant: Variant,
    pub rho: f64,
    pub lambda: f64,
    pub lr: f64,
    pub base: BaseOptimizer,
    pub scheme: WeightingScheme,
    pub normalize: Normalize,
    pub estimator: Estimator,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            variant: Variant::Eisam,
            rho: 0.05,
            lambda: 0.5,
            lr: 5e-4,
            base: BaseOptimizer::adam(),
            scheme: WeightingScheme::Exponential { gamma: 2.0 },
            normalize: Normalize::None,
            estimator: Estimator::Unbiased,
            batch_size: 64,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return bad("rho must be finite and >= 0");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if let BaseOptimizer::Adam { beta1, beta2, eps } = self.base {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState {
    pub step_count: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptState {
    pub fn new(dim: usize, base: &BaseOptimizer) -> Self {
        match base {
            BaseOptimizer::Sgd => OptState::default(),
            BaseOptimizer::Adam { .. } => OptState {
                step_count: 0,
                m: vec![0.0; dim],
                v: vec![0.0; dim],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StepReport {
    pub loss: f64,
    pub weighted_loss: f64,
    pub grad_w_norm: f64,
    pub eps_norm: f64,
    pub g1_norm: f64,
    pub g2_norm: f64,
    pub clamped: bool,
    /// The perturbation was degenerate and a plain step was taken instead.
    pub fallback: bool,
    pub forward_passes: u32,
    pub backward_evals: u32,
    pub wall_nanos: u64,
}

/// Counts forward passes and backward weight-set accumulations.
struct Counted<'a, M: ?Sized> {
    model: &'a M,
    forwards: u32,
    backwards: u32,
    clamped: bool,
}

impl<'a, M: LossModel + ?Sized> Counted<'a, M> {
    fn new(model: &'a M) -> Self {
        Counted {
            model,
            forwards: 0,
            backwards: 0,
            clamped: false,
        }
    }

    fn eval(&mut self, theta: &[f64], batch: &Batch, ws: &[&[f64]]) -> Result<crate::model::Evaluation> {
        let e = self.model.evaluate(theta, batch, ws)?;
        self.forwards += 1;
        self.backwards += ws.len() as u32;
        self.clamped |= e.losses.clamped > 0;
        Ok(e)
    }
}

fn mean_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Per-example weights `w_k` such that `L_B^w = Σ_k w_k ℓ_k`.
pub fn sample_weights(batch: &Batch, weights: &ItemWeights, estimator: Estimator) -> Result<Vec<f64>> {
    let b = batch.len() as f64;
    match estimator {
        Estimator::Unbiased => batch
            .targets
            .iter()
            .map(|&t| Ok(weights.estimator_weight(t)? / b))
            .collect(),
        Estimator::Grouped => {
            let mut counts = std::collections::HashMap::new();
            for &t in &batch.targets {
                *counts.entry(t).or_insert(0usize) += 1;
            }
            Ok(batch
                .targets
                .iter()
                .map(|t| weights.f[*t] / counts[t] as f64)
                .collect())
        }
    }
}

/// `(L_B^w, ∇L_B^w)` at `theta`.
pub fn weighted_batch_loss_and_grad<M: LossModel + ?Sized>(
    model: &M,
    theta: &[f64],
    batch: &Batch,
    weights: &ItemWeights,
    estimator: Estimator,
) -> Result<(f64, Vec<f64>)> {
    let w = sample_weights(batch, weights, estimator)?;
    let mut e = model.evaluate(theta, batch, &[&w])?;
    Ok((e.losses.weighted_sum(&w), e.grads.pop().expect("one gradient")))
}

/// `ρ g / ‖g‖₂`; the zero vector when `ρ = 0`.
pub fn epsilon_hat(g: &[f64], rho: f64) -> Result<Vec<f64>> {
    if rho == 0.0 {
        return Ok(vec![0.0; g.len()]);
    }
    let norm = l2_norm(g);
    if !(norm >= ZERO_GRADIENT_NORM) {
        return Err(Error::ZeroGradient);
    }
    let scale = rho / norm;
    Ok(g.iter().map(|x| x * scale).collect())
}

fn shifted(theta: &[f64], delta: &[f64]) -> Vec<f64> {
    theta.iter().zip(delta).map(|(a, b)| a + b).collect()
}

/// Applies `total_grad` with the configured base optimizer.
pub fn base_update(
    state: &mut OptState,
    theta: &mut [f64],
    total_grad: &[f64],
    cfg: &OptimizerConfig,
) -> Result<()> {
    if total_grad.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: total_grad.len(),
        });
    }
    if total_grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step: state.step_count,
        });
    }
    state.step_count += 1;
    match cfg.base {
        BaseOptimizer::Sgd => {
            for (p, g) in theta.iter_mut().zip(total_grad) {
                *p -= cfg.lr * g;
            }
        }
        BaseOptimizer::Adam { beta1, beta2, eps } => {
            if state.m.len() != theta.len() {
                state.m = vec![0.0; theta.len()];
                state.v = vec![0.0; theta.len()];
            }
            let t = state.step_count as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, g), m), v) in theta
                .iter_mut()
                .zip(total_grad)
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    if theta.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step: state.step_count - 1,
        });
    }
    Ok(())
}

fn finish<M: LossModel + ?Sized>(
    counted: Counted<'_, M>,
    mut report: StepReport,
    state: &mut OptState,
    theta: &mut [f64],
    total: &[f64],
    cfg: &OptimizerConfig,
    start: Instant,
) -> Result<StepReport> {
    base_update(state, theta, total, cfg)?;
    report.forward_passes = counted.forwards;
    report.backward_evals = counted.backwards;
    report.clamped = counted.clamped;
    report.wall_nanos = start.elapsed().as_nanos() as u64;
    Ok(report)
}

fn logged_weighted_loss(losses: &[f64], batch: &Batch, weights: &ItemWeights, cfg: &OptimizerConfig) -> f64 {
    match sample_weights(batch, weights, cfg.estimator) {
        Ok(w) => losses.iter().zip(&w).map(|(l, w)| l * w).sum(),
        Err(_) => f64::NAN,
    }
}

/// Plain step on the batch-mean loss.
pub fn plain_step<M: LossModel + ?Sized>(
    model: &M,
    theta: &mut [f64],
    state: &mut OptState,
    batch: &Batch,
    weights: &ItemWeights,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let start = Instant::now();
    let mut c = Counted::new(model);
    let mean = mean_weights(batch.len());
    let mut e = c.eval(theta, batch, &[&mean])?;
    let g = e.grads.pop().expect("one gradient");
    let report = StepReport {
        loss: e.losses.mean(),
        weighted_loss: logged_weighted_loss(&e.losses.losses, batch, weights, cfg),
        g2_norm: l2_norm(&g),
        ..Default::default()
    };
    finish(c, report, state, theta, &g, cfg, start)
}

/// Re-weighted step: per-example weights `f(q_{i_k})`, normalised to mean one
/// over the batch.
pub fn rw_step<M: LossModel + ?Sized>(
    model: &M,
    theta: &mut [f64],
    state: &mut OptState,
    batch: &Batch,
    weights: &ItemWeights,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let start = Instant::now();
    let mut c = Counted::new(model);
    let raw: Vec<f64> = batch.targets.iter().map(|&t| weights.f[t]).collect();
    let mean_f = raw.iter().sum::<f64>() / raw.len() as f64;
    let b = batch.len() as f64;
    let (w, fallback) = if mean_f > 0.0 && mean_f.is_finite() {
        (raw.iter().map(|x| x / mean_f / b).collect(), false)
    } else {
        (mean_weights(batch.len()), true)
    };
    let mut e = c.eval(theta, batch, &[&w])?;
    let g = e.grads.pop().expect("one gradient");
    let report = StepReport {
        loss: e.losses.mean(),
        weighted_loss: e.losses.weighted_sum(&w),
        g2_norm: l2_norm(&g),
        fallback,
        ..Default::default()
    };
    finish(c, report, state, theta, &g, cfg, start)
}

/// Standard SAM: ascend along the batch-mean gradient, descend with the
/// gradient at the perturbed point.
pub fn sam_step<M: LossModel + ?Sized>(
    model: &M,
    theta: &mut [f64],
    state: &mut OptState,
    batch: &Batch,
    weights: &ItemWeights,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let start = Instant::now();
    let mut c = Counted::new(model);
    let mean = mean_weights(batch.len());
    let mut e = c.eval(theta, batch, &[&mean])?;
    let g = e.grads.pop().expect("one gradient");
    let mut report = StepReport {
        loss: e.losses.mean(),
        weighted_loss: logged_weighted_loss(&e.losses.losses, batch, weights, cfg),
        grad_w_norm: l2_norm(&g),
        ..Default::default()
    };
    let total = match epsilon_hat(&g, cfg.rho) {
        Ok(_) if cfg.rho == 0.0 => g,
        Ok(eps) => {
            report.eps_norm = cfg.rho;
            let mut pe = c.eval(&shifted(theta, &eps), batch, &[&mean])?;
            pe.grads.pop().expect("one gradient")
        }
        Err(Error::ZeroGradient) => {
            report.fallback = true;
            g
        }
        Err(e) => return Err(e),
    };
    report.g1_norm = l2_norm(&total);
    finish(c, report, state, theta, &total, cfg, start)
}

/// EISAM: the shared perturbation follows the weighted-loss gradient and the
/// update is `λ g₁ + g₂` with `g₂ = ∇L_B − λ ∇L_B^w` reusing the first pass.
pub fn eisam_step<M: LossModel + ?Sized>(
    model: &M,
    theta: &mut [f64],
    state: &mut OptState,
    batch: &Batch,
    weights: &ItemWeights,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let start = Instant::now();
    let mut c = Counted::new(model);
    let mean = mean_weights(batch.len());
    let w = sample_weights(batch, weights, cfg.estimator)?;
    let mut e = c.eval(theta, batch, &[&mean, &w])?;
    let g_w = e.grads.pop().expect("weighted gradient");
    let g = e.grads.pop().expect("plain gradient");
    let mut report = StepReport {
        loss: e.losses.mean(),
        weighted_loss: e.losses.weighted_sum(&w),
        grad_w_norm: l2_norm(&g_w),
        ..Default::default()
    };
    let total = match epsilon_hat(&g_w, cfg.rho) {
        // ε̂ = 0 gives g₁ = g_w, so λ g₁ + g₂ collapses to ∇L_B.
        Ok(_) if cfg.rho == 0.0 => {
            report.g1_norm = report.grad_w_norm;
            g
        }
        Ok(eps) => {
            report.eps_norm = cfg.rho;
            let mut pe = c.eval(&shifted(theta, &eps), batch, &[&w])?;
            let g1 = pe.grads.pop().expect("perturbed gradient");
            let g2: Vec<f64> = g.iter().zip(&g_w).map(|(a, b)| a - cfg.lambda * b).collect();
            report.g1_norm = l2_norm(&g1);
            report.g2_norm = l2_norm(&g2);
            g1.iter().zip(&g2).map(|(a, b)| cfg.lambda * a + b).collect()
        }
        Err(Error::ZeroGradient) => {
            report.fallback = true;
            g
        }
        Err(e) => return Err(e),
    };
    finish(c, report, state, theta, &total, cfg, start)
}

/// GroupSAM over the head/tail partition: each group present in the batch gets
/// its own perturbation from its group-mean gradient, and the update is
/// `∇L_B + λ Σ_g [∇L_g(θ + ε̂_g) − ∇L_g(θ)]`. Group losses are masked
/// full-batch evaluations, one forward pass per group.
pub fn group_sam_step<M: LossModel + ?Sized>(
    model: &M,
    theta: &mut [f64],
    state: &mut OptState,
    batch: &Batch,
    weights: &ItemWeights,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let start = Instant::now();
    let mut c = Counted::new(model);
    let mean = mean_weights(batch.len());
    let group_weights: Vec<Vec<f64>> = [true, false]
        .into_iter()
        .filter_map(|head| {
            let members = batch
                .targets
                .iter()
                .filter(|&&t| weights.is_head[t] == head)
                .count();
            (members > 0).then(|| {
                batch
                    .targets
                    .iter()
                    .map(|&t| if weights.is_head[t] == head { 1.0 / members as f64 } else { 0.0 })
                    .collect()
            })
        })
        .collect();
    let mut sets: Vec<&[f64]> = vec![&mean];
    sets.extend(group_weights.iter().map(|w| w.as_slice()));
    let e = c.eval(theta, batch, &sets)?;
    let mut grads = e.grads.into_iter();
    let g = grads.next().expect("plain gradient");
    let mut report = StepReport {
        loss: e.losses.mean(),
        weighted_loss: logged_weighted_loss(&e.losses.losses, batch, weights, cfg),
        grad_w_norm: l2_norm(&g),
        ..Default::default()
    };
    if cfg.rho == 0.0 {
        return finish(c, report, state, theta, &g, cfg, start);
    }
    let mut total = g;
    let mut any = false;
    for (gw, g_group) in group_weights.iter().zip(grads) {
        let eps = match epsilon_hat(&g_group, cfg.rho) {
            Ok(eps) => eps,
            Err(Error::ZeroGradient) => {
                report.fallback = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        any = true;
        let mut pe = c.eval(&shifted(theta, &eps), batch, &[gw])?;
        let g_pert = pe.grads.pop().expect("perturbed gradient");
        for ((t, a), b) in total.iter_mut().zip(&g_pert).zip(&g_group) {
            *t += cfg.lambda * (a - b);
        }
    }
    if any {
        report.eps_norm = cfg.rho;
    }
    report.g1_norm = l2_norm(&total);
    finish(c, report, state, theta, &total, cfg, start)
}

/// Holds the configuration, base-optimizer state and item weights of a run.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub state: OptState,
    pub weights: ItemWeights,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, weights: ItemWeights, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let state = OptState::new(dim, &cfg.base);
        Ok(Optimizer { cfg, state, weights })
    }

    pub fn step<M: LossModel + ?Sized>(&mut self, model: &M, theta: &mut [f64], batch: &Batch) -> Result<StepReport> {
        let step = match self.cfg.variant {
            Variant::Plain => plain_step,
            Variant::Rw => rw_step,
            Variant::Sam => sam_step,
            Variant::GroupSAM => group_sam_step,
            Variant::Eisam => eisam_step,
        };
        step(model, theta, &mut self.state, batch, &self.weights, &self.cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_weighted_loss: f64,
    pub wall_seconds: f64,
    pub clamp_count: usize,
    pub fallback_count: usize,
    pub forward_passes: u64,
    pub backward_evals: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
}

/// Runs `epochs` passes over `train`, each a fresh seeded permutation cut into
/// consecutive batches (the last one possibly partial).
pub fn train<M: LossModel + ?Sized>(
    model: &M,
    theta0: &[f64],
    train: &SequenceDataset,
    opt: &mut Optimizer,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut theta = theta0.to_vec();
    let all = Batch::from_examples(&train.examples);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut summaries = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE_BASE + epoch as u64));
        let mut s = EpochSummary {
            epoch: epoch + 1,
            steps: 0,
            mean_loss: 0.0,
            mean_weighted_loss: 0.0,
            wall_seconds: 0.0,
            clamp_count: 0,
            fallback_count: 0,
            forward_passes: 0,
            backward_evals: 0,
        };
        for idx in order.chunks(opt.cfg.batch_size) {
            let batch = all.select(idx);
            let r = opt.step(model, &mut theta, &batch)?;
            s.steps += 1;
            s.mean_loss += r.loss;
            s.mean_weighted_loss += r.weighted_loss;
            s.clamp_count += r.clamped as usize;
            s.fallback_count += r.fallback as usize;
            s.forward_passes += r.forward_passes as u64;
            s.backward_evals += r.backward_evals as u64;
        }
        s.mean_loss /= s.steps as f64;
        s.mean_weighted_loss /= s.steps as f64;
        s.wall_seconds = start.elapsed().as_secs_f64();
        summaries.push(s);
    }
    Ok(TrainOutcome {
        theta,
        epochs: summaries,
    })
}
