//! Stochastic optimization of the bound.
//!
//! RMSProp ascent with step scale `α / t^{1/2+ε}`, one noise draw per
//! observation per step, minibatch terms scaled by `N / b`.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;

use crate::autodiff::{batch_gradient, estimate_bound, Architecture, GradientReport, ParameterVector, ScoreBaseline};
use crate::error::{check_len, contract, Error, Result};
use crate::linalg::Matrix;
use crate::targets::TargetModel;
use crate::vgp::NoiseDraw;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Base rate `α`.
    pub alpha: f64,
    /// Squared-gradient decay `ρ`.
    pub rho: f64,
    /// Stabilizer `δ`.
    pub delta: f64,
    /// Schedule exponent offset `ε` in `t^{1/2+ε}`.
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            rho: 0.9,
            delta: 1e-8,
            eps: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(contract("alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(contract("rho must lie in [0, 1)"));
        }
        if !(self.delta > 0.0) || !(self.eps > 0.0) {
            return Err(contract("delta and eps must be positive"));
        }
        Ok(())
    }

    /// Step scale at step `t` (1-based).
    pub fn schedule(&self, t: u64) -> f64 {
        self.alpha / (t as f64).powf(0.5 + self.eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub accum: Vec<f64>,
    /// Steps taken so far.
    pub t: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        Self {
            config,
            accum: vec![0.0; len],
            t: 0,
        }
    }
}

/// One ascent step. On a non-finite gradient nothing is modified.
pub fn rmsprop_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    check_len("rmsprop params", state.accum.len(), params.len())?;
    check_len("rmsprop grad", state.accum.len(), grad.len())?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { node: "rmsprop gradient" });
    }
    state.t += 1;
    let OptimizerConfig { rho, delta, .. } = state.config;
    let scale = state.config.schedule(state.t);
    for ((a, p), &g) in state.accum.iter_mut().zip(params.iter_mut()).zip(grad) {
        *a = rho * *a + (1.0 - rho) * g * g;
        *p += scale * g / (*a + delta).sqrt();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Observations per step; clamped to the dataset size.
    pub minibatch: usize,
    pub optimizer: OptimizerConfig,
    pub baseline_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            minibatch: 1,
            optimizer: OptimizerConfig::default(),
            baseline_decay: crate::autodiff::DEFAULT_BASELINE_DECAY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub prior_kl: f64,
    pub aux_penalty: f64,
    pub grad_norm: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean of `total` over the `window` records ending at `end` (exclusive).
    pub fn smoothed_total(&self, end: usize, window: usize) -> Option<f64> {
        if window == 0 || end > self.records.len() || end < window {
            return None;
        }
        let s: f64 = self.records[end - window..end].iter().map(|r| r.total).sum();
        Some(s / window as f64)
    }
}

/// Wall-clock source for the `ms` trace column.
pub trait Clock {
    fn elapsed_ms(&mut self) -> f64;
}

/// Reports zero, which keeps traces reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn elapsed_ms(&mut self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub params: ParameterVector,
    pub trace: TrainTrace,
}

/// A failed run keeps the trace and parameters up to the failing step.
#[derive(Debug, Clone)]
pub struct FitFailure {
    pub error: Error,
    pub params: ParameterVector,
    pub trace: TrainTrace,
}

pub fn check_dataset(dataset: &Matrix, model: &dyn TargetModel) -> Result<()> {
    if dataset.rows() == 0 {
        return Err(contract("dataset needs at least one observation"));
    }
    check_len("dataset columns", model.obs_dim(), dataset.cols())?;
    if !dataset.is_finite() {
        return Err(contract("dataset entries must be finite"));
    }
    Ok(())
}

/// Maximizes the bound over `dataset`, starting from `init`.
pub fn fit<R: Rng + ?Sized>(
    dataset: &Matrix,
    model: &dyn TargetModel,
    arch: &Architecture,
    config: &TrainConfig,
    init: ParameterVector,
    rng: &mut R,
    clock: &mut dyn Clock,
) -> core::result::Result<FitOutput, FitFailure> {
    let mut params = init;
    let mut trace = TrainTrace::default();
    let setup = (|| {
        arch.validate(model)?;
        check_dataset(dataset, model)?;
        config.optimizer.validate()?;
        if params.layout != arch.layout() {
            return Err(contract("initial parameters do not match the architecture"));
        }
        if config.minibatch == 0 {
            return Err(contract("minibatch size must be at least 1"));
        }
        Ok(())
    })();
    if let Err(error) = setup {
        return Err(FitFailure { error, params, trace });
    }

    let n = dataset.rows();
    let b = config.minibatch.min(n);
    let scale = n as f64 / b as f64;
    let mut state = OptimizerState::new(config.optimizer, params.len());
    let mut baseline = ScoreBaseline::new(config.baseline_decay);

    for iteration in 1..=config.iterations {
        let step = (|| -> Result<GradientReport> {
            let indices: Vec<usize> = if b == n {
                (0..n).collect()
            } else {
                rand::seq::index::sample(rng, n, b).into_vec()
            };
            let batch: Vec<&[f64]> = indices.iter().map(|&i| dataset.row(i)).collect();
            let noises: Vec<NoiseDraw> = indices.iter().map(|_| arch.draw_noise(rng)).collect();
            let report = batch_gradient(&params, &batch, model, arch, &noises, scale, Some(&mut baseline))?;
            rmsprop_step(&mut state, &mut params.flat, &report.grad)?;
            Ok(report)
        })();
        match step {
            Ok(report) => trace.records.push(TraceRecord {
                iteration,
                total: report.value,
                reconstruction: report.terms.reconstruction,
                prior_kl: report.terms.prior_kl,
                aux_penalty: report.terms.aux_penalty,
                grad_norm: report.norm(),
                ms: clock.elapsed_ms(),
            }),
            Err(error) => return Err(FitFailure { error, params, trace }),
        }
    }
    Ok(FitOutput { params, trace })
}

/// Mean bound per observation, with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Minimum Monte Carlo samples per observation for [`evaluate_bound`].
pub const MIN_EVAL_SAMPLES: usize = 30;

/// Average over observations of the per-observation Monte Carlo bound.
pub fn evaluate_bound<R: Rng + ?Sized>(
    params: &ParameterVector,
    dataset: &Matrix,
    model: &dyn TargetModel,
    arch: &Architecture,
    n_samples: usize,
    rng: &mut R,
) -> Result<BoundEstimate> {
    if n_samples < MIN_EVAL_SAMPLES {
        return Err(contract("evaluation needs at least 30 samples per observation"));
    }
    arch.validate(model)?;
    check_dataset(dataset, model)?;
    let per_point: Result<Vec<(f64, f64)>> = (0..dataset.rows())
        .map(|i| {
            let e = estimate_bound(params, dataset.row(i), model, arch, n_samples, rng)?;
            Ok((e.total, e.std_error))
        })
        .collect();
    Ok(combine_point_bounds(&per_point?))
}

/// Combines independent per-observation `(mean, SE)` pairs.
pub fn combine_point_bounds(points: &[(f64, f64)]) -> BoundEstimate {
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let var: f64 = points.iter().map(|p| p.1 * p.1).sum();
    BoundEstimate {
        mean,
        std_error: var.sqrt() / n,
    }
}
