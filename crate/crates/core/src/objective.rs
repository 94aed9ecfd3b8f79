//! The auto-encoding variational bound.
//!
//! For one observation `x` and one draw of `(ξ, η, ε)`:
//!
//! ```text
//! total = reconstruction − prior_kl − aux_penalty
//! aux_penalty = KL(q(f|ξ) ‖ r(f|ξ,z)) + log q(ξ) − log r(ξ|z)
//! ```
//!
//! In [`BoundMode::Analytic`] the first two terms are `log p(x|z)` and the
//! closed-form `KL(q(z|f) ‖ N(0, I))`. In [`BoundMode::General`] they are
//! replaced by `log p(x, z) − log q(z|f)` and `prior_kl` is reported as zero.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;

use crate::error::{check_len, contract, Error, Result};
use crate::kernel::{KernelParams, VariationalData};
use crate::nets::{r_params_for, FeedforwardSpec};
use crate::special::{normal_logpdf, LN_2PI};
use crate::targets::TargetModel;
use crate::vgp::{generate_from_noise, FamilyKind, LatentInput, MappingSample, MeanFieldFamily, NoiseDraw};

/// Diagonal Gaussian `r(ξ, f | x, z)`, laid out as `[ξ-block (c), f-block (d')]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl AuxiliaryParams {
    /// Standard normal over `dim` coordinates.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; dim],
            log_variance: alloc::vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Source of auxiliary parameters for a given `(x, z)`.
pub trait AuxiliaryModel {
    fn params(&self, x: &[f64], z: &[f64]) -> Result<AuxiliaryParams>;
}

impl AuxiliaryModel for AuxiliaryParams {
    fn params(&self, _x: &[f64], _z: &[f64]) -> Result<AuxiliaryParams> {
        Ok(self.clone())
    }
}

/// An r-network with fixed weights.
#[derive(Debug, Clone, Copy)]
pub struct AuxiliaryNetwork<'a> {
    pub spec: &'a FeedforwardSpec,
    pub weights: &'a [f64],
}

impl AuxiliaryModel for AuxiliaryNetwork<'_> {
    fn params(&self, x: &[f64], z: &[f64]) -> Result<AuxiliaryParams> {
        r_params_for(x, z, self.spec, self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMode {
    /// Closed-form `KL(q(z|f) ‖ N(0, I))`; Gaussian family and standard normal prior only.
    Analytic,
    /// `log p(x, z) − log q(z|f)` in place of the first two terms.
    General,
}

impl BoundMode {
    /// The mode the target declares for this family.
    pub fn for_target(model: &dyn TargetModel, family: &MeanFieldFamily) -> Self {
        if model.analytic_prior_kl() && family.kind == FamilyKind::Gaussian {
            Self::Analytic
        } else {
            Self::General
        }
    }

    pub fn check(self, model: &dyn TargetModel, family: &MeanFieldFamily) -> Result<()> {
        if self == Self::Analytic && (!model.analytic_prior_kl() || family.kind != FamilyKind::Gaussian) {
            return Err(contract(
                "analytic bound needs a Gaussian mean-field and a standard normal prior",
            ));
        }
        Ok(())
    }
}

/// One sample of the three terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Terms {
    pub reconstruction: f64,
    pub prior_kl: f64,
    pub aux_penalty: f64,
}

impl Terms {
    pub fn total(&self) -> f64 {
        self.reconstruction - self.prior_kl - self.aux_penalty
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveEstimate {
    pub reconstruction: f64,
    pub prior_kl: f64,
    pub aux_penalty: f64,
    pub total: f64,
    pub n_samples: usize,
    /// Standard error of `total`.
    pub std_error: f64,
    /// Per-sample variance of `total`.
    pub sample_variance: f64,
}

impl ObjectiveEstimate {
    pub fn from_terms(samples: &[Terms]) -> Self {
        let n = samples.len();
        let nf = n as f64;
        let mean = |f: fn(&Terms) -> f64| samples.iter().map(f).sum::<f64>() / nf;
        let total = mean(Terms::total);
        let var = if n > 1 {
            samples.iter().map(|t| (t.total() - total).powi(2)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        Self {
            reconstruction: mean(|t| t.reconstruction),
            prior_kl: mean(|t| t.prior_kl),
            aux_penalty: mean(|t| t.aux_penalty),
            total,
            n_samples: n,
            std_error: (var / nf).sqrt(),
            sample_variance: var,
        }
    }
}

/// `KL(N(m1, diag v1) ‖ N(m2, diag v2))`.
pub fn diag_gaussian_kl(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> Result<f64> {
    let n = m1.len();
    check_len("kl v1", n, v1.len())?;
    check_len("kl m2", n, m2.len())?;
    check_len("kl v2", n, v2.len())?;
    let mut kl = 0.0;
    for i in 0..n {
        if !(v1[i] > 0.0 && v2[i] > 0.0) {
            return Err(contract("KL needs strictly positive variances"));
        }
        let d = m1[i] - m2[i];
        kl += d * d / v2[i] + v1[i] / v2[i] + v2[i].ln() - v1[i].ln() - 1.0;
    }
    Ok(0.5 * kl)
}

/// `KL(N(μ, diag e^{lv}) ‖ N(0, I))` for a Gaussian mean-field packed as `[μ, lv]`.
pub fn standard_normal_kl(lambda: &[f64]) -> f64 {
    let d = lambda.len() / 2;
    (0..d)
        .map(|i| {
            let (mu, lv) = (lambda[i], lambda[d + i]);
            0.5 * (mu * mu + lv.exp() - lv - 1.0)
        })
        .sum()
}

/// The auxiliary penalty for one draw. `q(f|ξ)` has the conditional mean
/// and the shared conditional variance in every output coordinate.
pub fn aux_penalty(input: &LatentInput, mapping: &MappingSample, aux: &AuxiliaryParams) -> Result<f64> {
    let c = input.xi.len();
    let dout = mapping.conditional.mean.len();
    check_len("auxiliary mean", c + dout, aux.mean.len())?;
    check_len("auxiliary log-variance", c + dout, aux.log_variance.len())?;
    let var_r: Vec<f64> = aux.log_variance.iter().map(|lv| lv.exp()).collect();
    if var_r.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(contract("auxiliary variances must be positive and finite"));
    }
    let vq = alloc::vec![mapping.conditional.variance; dout];
    let kl = diag_gaussian_kl(&mapping.conditional.mean, &vq, &aux.mean[c..], &var_r[c..])?;
    let log_r_xi: f64 = (0..c)
        .map(|j| normal_logpdf(input.xi[j], aux.mean[j], var_r[j]))
        .sum();
    Ok(kl + input.log_density() - log_r_xi)
}

/// The penalty when `z = f` (Delta family): `E_η[log q(f|ξ)] + log q(ξ) − log r(ξ|z)`.
/// `r` covers `ξ` only; the `f` block of the general penalty has no
/// counterpart because `f` is observed through `z`.
pub fn delta_aux_penalty(input: &LatentInput, mapping: &MappingSample, aux: &AuxiliaryParams) -> Result<f64> {
    let c = input.xi.len();
    check_len("auxiliary mean", c, aux.mean.len())?;
    check_len("auxiliary log-variance", c, aux.log_variance.len())?;
    let v = mapping.conditional.variance;
    if !(v > 0.0) {
        return Err(contract("Delta family needs a positive conditional variance"));
    }
    let dout = mapping.conditional.mean.len() as f64;
    let neg_entropy = -0.5 * dout * (1.0 + LN_2PI + v.ln());
    let mut log_r_xi = 0.0;
    for j in 0..c {
        let var = aux.log_variance[j].exp();
        if !(var > 0.0) || !var.is_finite() {
            return Err(contract("auxiliary variances must be positive and finite"));
        }
        log_r_xi += normal_logpdf(input.xi[j], aux.mean[j], var);
    }
    Ok(neg_entropy + input.log_density() - log_r_xi)
}

/// A single datapoint's VGP: its variational data, kernel, and family.
#[derive(Debug, Clone, Copy)]
pub struct QConfig<'a> {
    pub data: &'a VariationalData,
    pub kernel: &'a KernelParams,
    pub family: &'a MeanFieldFamily,
    pub mode: BoundMode,
}

/// The three terms for one draw of exogenous noise.
pub fn sample_terms(
    x: &[f64],
    model: &dyn TargetModel,
    q: &QConfig<'_>,
    aux: &dyn AuxiliaryModel,
    noise: &NoiseDraw,
) -> Result<Terms> {
    let draw = generate_from_noise(q.data, q.kernel, q.family, noise)?;
    let lambda = &draw.mapping.raw;
    let (reconstruction, prior_kl) = data_terms(x, model, q.family, q.mode, lambda, &draw.z)?;
    let r = aux.params(x, &draw.z)?;
    let aux_penalty = if q.family.kind == FamilyKind::Delta {
        delta_aux_penalty(&draw.input, &draw.mapping, &r)?
    } else {
        aux_penalty(&draw.input, &draw.mapping, &r)?
    };
    Ok(Terms {
        reconstruction,
        prior_kl,
        aux_penalty,
    })
}

/// `(reconstruction, prior_kl)` given mean-field parameters and a latent sample.
pub fn data_terms(
    x: &[f64],
    model: &dyn TargetModel,
    family: &MeanFieldFamily,
    mode: BoundMode,
    lambda: &[f64],
    z: &[f64],
) -> Result<(f64, f64)> {
    Ok(match mode {
        BoundMode::Analytic => (model.log_likelihood(x, z), standard_normal_kl(lambda)),
        BoundMode::General => (model.log_joint(x, z) - family.log_density(lambda, z), 0.0),
    })
}

/// Monte Carlo estimate of the bound over `n_samples` fresh `(ξ, η, ε)` draws.
pub fn objective_estimate<R: Rng + ?Sized>(
    x: &[f64],
    model: &dyn TargetModel,
    q: &QConfig<'_>,
    aux: &dyn AuxiliaryModel,
    n_samples: usize,
    rng: &mut R,
) -> Result<ObjectiveEstimate> {
    if n_samples == 0 {
        return Err(contract("objective_estimate needs at least one sample"));
    }
    q.mode.check(model, q.family)?;
    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let noise = NoiseDraw::sample(q.kernel.dim(), q.family, rng);
        let t = sample_terms(x, model, q, aux, &noise)?;
        if !t.total().is_finite() {
            return Err(Error::NonFiniteLogDensity {
                sample: s,
                value: t.total(),
            });
        }
        samples.push(t);
    }
    Ok(ObjectiveEstimate::from_terms(&samples))
}
