//! Gradients of the bound with respect to every trainable parameter.
//!
//! The forward pass at fixed noise `(ξ, η, ε)` records what each stage needs;
//! the reverse pass composes hand-written pullbacks in the opposite order:
//! data terms and auxiliary penalty, r-network, mean-field sample, mapping,
//! GP conditional (kernel and Cholesky), q-network.
//!
//! Bernoulli mean-fields are not reparameterizable; [`score_function_sample`]
//! replaces the pathwise derivative through `z` by `∇ log q(z|f) · (g − b)`
//! while keeping the `ξ, η` path reparameterized.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, contract, Error, Result};
use crate::linalg::Matrix;
use crate::kernel::{
    gp_conditional_pullback, gp_conditional_taped, KernelKind, KernelParams, VariationalData, DEFAULT_JITTER_REL,
};
use crate::nets::{backward, forward_taped, q_params_for, r_network_spec, Activation, FeedforwardSpec, QSide};
use crate::objective::{
    data_terms, AuxiliaryModel, AuxiliaryNetwork, AuxiliaryParams, BoundMode, ObjectiveEstimate, QConfig, Terms,
};
use crate::special::sigmoid;
use crate::targets::TargetModel;
use crate::vgp::{sample_meanfield, FamilyKind, LatentInput, MeanFieldFamily, NoiseDraw};

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// All trainable parameters, flattened, with a segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub flat: Vec<f64>,
    pub layout: Vec<Segment>,
}

fn layout_from(spec: &[(&str, usize)]) -> Vec<Segment> {
    let mut offset = 0;
    spec.iter()
        .map(|&(name, len)| {
            let s = Segment {
                name: name.to_string(),
                offset,
                len,
            };
            offset += len;
            s
        })
        .collect()
}

impl ParameterVector {
    /// Checks that `layout` is contiguous and covers `flat` exactly.
    pub fn new(layout: Vec<Segment>, flat: Vec<f64>) -> Result<Self> {
        let mut offset = 0;
        for s in &layout {
            if s.offset != offset {
                return Err(contract(format!("segment `{}` is not contiguous", s.name)));
            }
            offset += s.len;
        }
        check_len("parameter layout", offset, flat.len())?;
        Ok(Self { flat, layout })
    }

    pub fn zeros(layout: Vec<Segment>) -> Self {
        let n = layout.iter().map(|s| s.len).sum();
        Self {
            flat: vec![0.0; n],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.layout.iter().find(|s| s.name == name).map(Segment::range)
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.range(name).map(|r| &self.flat[r])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.range(name).map(move |r| &mut self.flat[r])
    }

    /// Splits into per-segment vectors.
    pub fn unpack(&self) -> Vec<(String, Vec<f64>)> {
        self.layout
            .iter()
            .map(|s| (s.name.clone(), self.flat[s.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`unpack`](Self::unpack).
    pub fn pack(parts: &[(String, Vec<f64>)]) -> Result<Self> {
        let spec: Vec<(&str, usize)> = parts.iter().map(|(n, v)| (n.as_str(), v.len())).collect();
        let layout = layout_from(&spec);
        let flat = parts.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        Self::new(layout, flat)
    }

    fn segment_or_err(&self, name: &str) -> Result<Range<usize>> {
        self.range(name)
            .ok_or_else(|| contract(format!("parameter segment `{name}` missing")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub value: f64,
    pub terms: Terms,
    pub grad: Vec<f64>,
    pub segment_norms: Vec<(String, f64)>,
}

impl GradientReport {
    fn new(terms: Terms, grad: Vec<f64>, layout: &[Segment]) -> Result<Self> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { node: "gradient" });
        }
        let segment_norms = segment_norms(&grad, layout);
        Ok(Self {
            value: terms.total(),
            terms,
            grad,
            segment_norms,
        })
    }

    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub fn segment_norms(grad: &[f64], layout: &[Segment]) -> Vec<(String, f64)> {
    layout
        .iter()
        .map(|s| {
            let n = grad[s.range()].iter().map(|g| g * g).sum::<f64>().sqrt();
            (s.name.clone(), n)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariationalKind {
    /// Variational Gaussian process over mean-field parameters.
    Vgp,
    /// Plain mean-field: the q-side outputs `λ` directly.
    MeanField,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuxSide {
    /// Free `(mean, log_variance)` shared by all `(x, z)`.
    Global,
    Network(FeedforwardSpec),
}

/// Deliberate defects for exercising the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Offsets the log-amplitude adjoint after the kernel pullback.
    KernelPullback,
}

/// Everything that fixes the shape of the parameter vector and the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub kind: VariationalKind,
    pub family: MeanFieldFamily,
    pub obs_dim: usize,
    /// Latent input dimension `c`.
    pub input_dim: usize,
    pub kernel_kind: KernelKind,
    pub jitter_rel: f64,
    pub q: QSide,
    pub aux: AuxSide,
    pub mode: BoundMode,
    pub fault: Option<Fault>,
}

/// Initial values for the non-network parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub log_amplitude: f64,
    pub log_weight: f64,
    /// Standard deviation of global anchor inputs.
    pub anchor_input_scale: f64,
    /// Standard deviation of global anchor outputs (and mean-field `λ`).
    pub anchor_output_scale: f64,
    pub aux_log_variance: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            log_amplitude: 0.0,
            log_weight: 0.0,
            anchor_input_scale: 1.0,
            anchor_output_scale: 0.1,
            aux_log_variance: -1.0,
        }
    }
}

const LOG_AMPLITUDE: &str = "kernel.log_amplitude";
const LOG_WEIGHTS: &str = "kernel.log_weights";
const Q_INPUTS: &str = "q.inputs";
const Q_OUTPUTS: &str = "q.outputs";
const Q_LAMBDA: &str = "q.lambda";
const Q_NET: &str = "q.net";
const R_MEAN: &str = "r.mean";
const R_LOG_VARIANCE: &str = "r.log_variance";
const R_NET: &str = "r.net";

impl Architecture {
    /// Global variational data and a global auxiliary model, ARD kernel.
    pub fn vgp(family: MeanFieldFamily, obs_dim: usize, input_dim: usize, anchors: usize, mode: BoundMode) -> Self {
        Self {
            kind: VariationalKind::Vgp,
            family,
            obs_dim,
            input_dim,
            kernel_kind: KernelKind::Ard,
            jitter_rel: DEFAULT_JITTER_REL,
            q: QSide::global(anchors, input_dim, family.output_dim()),
            aux: AuxSide::Global,
            mode,
            fault: None,
        }
    }

    /// Global mean-field parameters `λ`.
    pub fn mean_field(family: MeanFieldFamily, obs_dim: usize, mode: BoundMode) -> Self {
        Self {
            kind: VariationalKind::MeanField,
            family,
            obs_dim,
            input_dim: 0,
            kernel_kind: KernelKind::Ard,
            jitter_rel: DEFAULT_JITTER_REL,
            q: QSide::global(1, 0, family.output_dim()),
            aux: AuxSide::Global,
            mode,
            fault: None,
        }
    }

    pub fn amortize_q(mut self, hidden: &[usize], activation: Activation) -> Result<Self> {
        self.q = QSide::amortized(
            self.obs_dim,
            hidden,
            activation,
            self.q.anchors,
            self.q.input_dim,
            self.q.output_dim,
        )?;
        Ok(self)
    }

    pub fn with_aux_network(mut self, hidden: &[usize], activation: Activation) -> Result<Self> {
        self.aux = AuxSide::Network(r_network_spec(
            self.obs_dim,
            self.family.latent_dim,
            self.aux_dim(),
            hidden,
            activation,
        )?);
        Ok(self)
    }

    pub fn anchors(&self) -> usize {
        self.q.anchors
    }

    /// Dimension of `(ξ, f)`, or of `ξ` alone for the Delta family.
    pub fn aux_dim(&self) -> usize {
        match self.family.kind {
            FamilyKind::Delta => self.input_dim,
            _ => self.input_dim + self.family.output_dim(),
        }
    }

    pub fn validate(&self, model: &dyn TargetModel) -> Result<()> {
        check_len("target latent dimension", model.latent_dim(), self.family.latent_dim)?;
        check_len("target observation dimension", model.obs_dim(), self.obs_dim)?;
        self.mode.check(model, &self.family)?;
        if model.is_discrete() != (self.family.kind == FamilyKind::Bernoulli) {
            return Err(contract("Bernoulli mean-fields pair with discrete targets only"));
        }
        if self.family.kind == FamilyKind::Delta && self.kind != VariationalKind::Vgp {
            return Err(contract("a Delta mean-field has no density; it needs the VGP mapping"));
        }
        if self.kind == VariationalKind::Vgp && self.input_dim == 0 {
            return Err(contract("latent input dimension must be at least 1"));
        }
        if !(self.jitter_rel > 0.0 && self.jitter_rel <= crate::kernel::MAX_JITTER_REL) {
            return Err(contract("relative jitter must lie in (0, 1e-4]"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut spec: Vec<(&str, usize)> = Vec::new();
        if self.kind == VariationalKind::Vgp {
            spec.push((LOG_AMPLITUDE, 1));
            spec.push((LOG_WEIGHTS, self.input_dim));
        }
        match (&self.q.net, self.kind) {
            (Some(net), _) => spec.push((Q_NET, net.param_count())),
            (None, VariationalKind::Vgp) => {
                spec.push((Q_INPUTS, self.q.anchors * self.q.input_dim));
                spec.push((Q_OUTPUTS, self.q.anchors * self.q.output_dim));
            }
            (None, VariationalKind::MeanField) => spec.push((Q_LAMBDA, self.q.output_dim)),
        }
        if self.kind == VariationalKind::Vgp {
            match &self.aux {
                AuxSide::Global => {
                    spec.push((R_MEAN, self.aux_dim()));
                    spec.push((R_LOG_VARIANCE, self.aux_dim()));
                }
                AuxSide::Network(net) => spec.push((R_NET, net.param_count())),
            }
        }
        layout_from(&spec)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, init: &InitConfig, rng: &mut R) -> ParameterVector {
        let mut p = ParameterVector::zeros(self.layout());
        let normal = |scale: f64, out: &mut [f64], rng: &mut R| {
            for v in out {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        if let Some(s) = p.segment_mut(LOG_AMPLITUDE) {
            s[0] = init.log_amplitude;
        }
        if let Some(s) = p.segment_mut(LOG_WEIGHTS) {
            s.iter_mut().for_each(|v| *v = init.log_weight);
        }
        if let Some(s) = p.segment_mut(Q_INPUTS) {
            normal(init.anchor_input_scale, s, rng);
        }
        if let Some(s) = p.segment_mut(Q_OUTPUTS) {
            normal(init.anchor_output_scale, s, rng);
        }
        if let Some(s) = p.segment_mut(Q_LAMBDA) {
            normal(init.anchor_output_scale, s, rng);
        }
        if let Some(net) = &self.q.net {
            let w = net.init_weights(rng);
            p.segment_mut(Q_NET).expect("layout").copy_from_slice(&w);
        }
        if let Some(s) = p.segment_mut(R_LOG_VARIANCE) {
            s.iter_mut().for_each(|v| *v = init.aux_log_variance);
        }
        if let AuxSide::Network(net) = &self.aux {
            let w = net.init_weights(rng);
            p.segment_mut(R_NET).expect("layout").copy_from_slice(&w);
        }
        p
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.layout != self.layout() {
            return Err(contract("parameter layout does not match the architecture"));
        }
        Ok(())
    }

    pub fn kernel_params(&self, params: &ParameterVector) -> Result<KernelParams> {
        let la = params.segment_or_err(LOG_AMPLITUDE)?;
        let lw = params.segment_or_err(LOG_WEIGHTS)?;
        Ok(KernelParams {
            kind: self.kernel_kind,
            log_amplitude: params.flat[la.start],
            log_weights: params.flat[lw].to_vec(),
            jitter_rel: self.jitter_rel,
        })
    }

    fn q_range(&self, params: &ParameterVector) -> Result<Range<usize>> {
        if self.q.net.is_some() {
            return params.segment_or_err(Q_NET);
        }
        match self.kind {
            VariationalKind::Vgp => {
                let a = params.segment_or_err(Q_INPUTS)?;
                let b = params.segment_or_err(Q_OUTPUTS)?;
                Ok(a.start..b.end)
            }
            VariationalKind::MeanField => params.segment_or_err(Q_LAMBDA),
        }
    }

    /// Variational data for observation `x` (for mean-field: one anchor
    /// whose output is `λ`).
    pub fn variational_data(&self, params: &ParameterVector, x: &[f64]) -> Result<VariationalData> {
        q_params_for(x, &self.q, &params.flat[self.q_range(params)?])
    }

    pub fn aux_model<'a>(&'a self, params: &'a ParameterVector) -> Result<Box<dyn AuxiliaryModel + 'a>> {
        Ok(match &self.aux {
            AuxSide::Global => Box::new(AuxiliaryParams {
                mean: params.flat[params.segment_or_err(R_MEAN)?].to_vec(),
                log_variance: params.flat[params.segment_or_err(R_LOG_VARIANCE)?].to_vec(),
            }),
            AuxSide::Network(spec) => Box::new(AuxiliaryNetwork {
                spec,
                weights: &params.flat[params.segment_or_err(R_NET)?],
            }),
        })
    }

    /// Exogenous noise for one sample: `ξ` and `η` (VGP only) then `ε`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraw {
        match self.kind {
            VariationalKind::Vgp => NoiseDraw::sample(self.input_dim, &self.family, rng),
            VariationalKind::MeanField => NoiseDraw {
                xi: Vec::new(),
                eta: Vec::new(),
                eps: self.family.draw_noise(rng),
            },
        }
    }
}

/// The bound's terms at fixed noise, evaluated without any tape.
pub fn objective_at_noise(
    params: &ParameterVector,
    x: &[f64],
    model: &dyn TargetModel,
    arch: &Architecture,
    noise: &NoiseDraw,
) -> Result<Terms> {
    arch.check_params(params)?;
    let data = arch.variational_data(params, x)?;
    match arch.kind {
        VariationalKind::Vgp => {
            let kernel = arch.kernel_params(params)?;
            let q = QConfig {
                data: &data,
                kernel: &kernel,
                family: &arch.family,
                mode: arch.mode,
            };
            crate::objective::sample_terms(x, model, &q, arch.aux_model(params)?.as_ref(), noise)
        }
        VariationalKind::MeanField => {
            let lambda = data.outputs.row(0);
            let z = sample_meanfield(&arch.family, lambda, &noise.eps)?;
            let (reconstruction, prior_kl) = data_terms(x, model, &arch.family, arch.mode, lambda, &z)?;
            Ok(Terms {
                reconstruction,
                prior_kl,
                aux_penalty: 0.0,
            })
        }
    }
}

/// One draw `z ~ q(z | x)` at fixed noise.
pub fn posterior_draw(params: &ParameterVector, x: &[f64], arch: &Architecture, noise: &NoiseDraw) -> Result<Vec<f64>> {
    arch.check_params(params)?;
    let data = arch.variational_data(params, x)?;
    match arch.kind {
        VariationalKind::Vgp => {
            let kernel = arch.kernel_params(params)?;
            Ok(crate::vgp::generate_from_noise(&data, &kernel, &arch.family, noise)?.z)
        }
        VariationalKind::MeanField => sample_meanfield(&arch.family, data.outputs.row(0), &noise.eps),
    }
}

/// `n × d` draws from `q(z | x)`.
pub fn posterior_samples<R: Rng + ?Sized>(
    params: &ParameterVector,
    x: &[f64],
    arch: &Architecture,
    n: usize,
    rng: &mut R,
) -> Result<Matrix> {
    let d = arch.family.latent_dim;
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        out.extend(posterior_draw(params, x, arch, &arch.draw_noise(rng))?);
    }
    Matrix::from_vec(n, d, out)
}

/// Monte Carlo estimate of the bound for one observation.
pub fn estimate_bound<R: Rng + ?Sized>(
    params: &ParameterVector,
    x: &[f64],
    model: &dyn TargetModel,
    arch: &Architecture,
    n_samples: usize,
    rng: &mut R,
) -> Result<ObjectiveEstimate> {
    if n_samples == 0 {
        return Err(contract("bound estimate needs at least one sample"));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let noise = arch.draw_noise(rng);
        let t = objective_at_noise(params, x, model, arch, &noise)?;
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

/// How the adjoint crosses the `f → z` edge.
#[derive(Debug, Clone, Copy)]
enum Path {
    Pathwise,
    /// Score function with the given baseline subtracted from the signal.
    Score { baseline: f64 },
}

fn finite(node: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { node })
    }
}

/// Forward and reverse pass for one observation at fixed noise. The
/// gradient of `weight · total` is accumulated into `grad`.
fn accumulate(
    params: &ParameterVector,
    x: &[f64],
    model: &dyn TargetModel,
    arch: &Architecture,
    noise: &NoiseDraw,
    weight: f64,
    path: Path,
    grad: &mut [f64],
) -> Result<Terms> {
    let family = &arch.family;
    let d = family.latent_dim;
    let dout = family.output_dim();
    check_len("noise eps", d, noise.eps.len())?;

    // q-side
    let q_range = arch.q_range(params)?;
    let q_weights = &params.flat[q_range.clone()];
    let q_tape = match &arch.q.net {
        Some(net) => Some(forward_taped(net, q_weights, x)?),
        None => None,
    };
    let q_flat: &[f64] = match &q_tape {
        Some(t) => t.output(),
        None => q_weights,
    };
    check_finite_slice("q-network output", q_flat)?;
    let n_in = arch.q.anchors * arch.q.input_dim;
    let data = VariationalData::new(
        Matrix::from_vec(arch.q.anchors, arch.q.input_dim, q_flat[..n_in].to_vec())?,
        Matrix::from_vec(arch.q.anchors, arch.q.output_dim, q_flat[n_in..].to_vec())?,
    )?;

    // mapping
    let vgp = arch.kind == VariationalKind::Vgp;
    let kernel = if vgp { Some(arch.kernel_params(params)?) } else { None };
    let (f, cond_tape) = match &kernel {
        Some(kp) => {
            check_len("noise xi", arch.input_dim, noise.xi.len())?;
            check_len("noise eta", dout, noise.eta.len())?;
            let (cond, tape) = gp_conditional_taped(&noise.xi, &data, kp)?;
            finite("conditional variance", cond.variance)?;
            let sd = cond.variance.sqrt();
            let f: Vec<f64> = cond.mean.iter().zip(&noise.eta).map(|(m, e)| m + sd * e).collect();
            (f, Some((cond, tape)))
        }
        None => (data.outputs.row(0).to_vec(), None),
    };
    check_finite_slice("mapping", &f)?;
    let z = sample_meanfield(family, &f, &noise.eps)?;

    // data terms
    let (reconstruction, prior_kl) = data_terms(x, model, family, arch.mode, &f, &z)?;
    finite("reconstruction", reconstruction)?;
    finite("prior_kl", prior_kl)?;

    // auxiliary penalty
    let c = arch.input_dim;
    let delta = family.kind == FamilyKind::Delta;
    let mut aux_penalty = 0.0;
    let mut r_state = None;
    if let Some((cond, _)) = &cond_tape {
        let (r, r_tape) = match &arch.aux {
            AuxSide::Global => (
                AuxiliaryParams {
                    mean: params.flat[params.segment_or_err(R_MEAN)?].to_vec(),
                    log_variance: params.flat[params.segment_or_err(R_LOG_VARIANCE)?].to_vec(),
                },
                None,
            ),
            AuxSide::Network(spec) => {
                let w = &params.flat[params.segment_or_err(R_NET)?];
                let mut input = x.to_vec();
                input.extend_from_slice(&z);
                let tape = forward_taped(spec, w, &input)?;
                let half = tape.output().len() / 2;
                (
                    AuxiliaryParams {
                        mean: tape.output()[..half].to_vec(),
                        log_variance: tape.output()[half..].to_vec(),
                    },
                    Some(tape),
                )
            }
        };
        let input = LatentInput::standard_normal(noise.xi.clone());
        let vr: Vec<f64> = r.log_variance.iter().map(|l| l.exp()).collect();
        let vq = cond.variance;
        let mut kl = 0.0;
        if delta {
            kl = -0.5 * dout as f64 * (1.0 + crate::special::LN_2PI + vq.ln());
        } else {
            for i in 0..dout {
                let diff = cond.mean[i] - r.mean[c + i];
                kl += 0.5 * (diff * diff / vr[c + i] + vq / vr[c + i] + r.log_variance[c + i] - vq.ln() - 1.0);
            }
        }
        let log_r_xi: f64 = (0..c)
            .map(|j| crate::special::normal_logpdf(noise.xi[j], r.mean[j], vr[j]))
            .sum();
        aux_penalty = finite("aux_penalty", kl + input.log_density() - log_r_xi)?;
        r_state = Some((r, vr, r_tape));
    }

    let terms = Terms {
        reconstruction,
        prior_kl,
        aux_penalty,
    };

    // ---- reverse pass ----
    let w = weight;
    let mut f_bar = vec![0.0; dout];
    let mut z_bar = vec![0.0; d];
    let mut mean_bar = vec![0.0; dout];
    let mut var_bar = 0.0;

    if let (Some((cond, _)), Some((r, vr, r_tape))) = (&cond_tape, &r_state) {
        let vq = cond.variance;
        let mut rm_bar = vec![0.0; r.mean.len()];
        let mut rl_bar = vec![0.0; r.mean.len()];
        if delta {
            var_bar += w * 0.5 * dout as f64 / vq;
        } else {
            for i in 0..dout {
                let k = c + i;
                let diff = cond.mean[i] - r.mean[k];
                mean_bar[i] -= w * diff / vr[k];
                rm_bar[k] += w * diff / vr[k];
                var_bar -= w * 0.5 * (1.0 / vr[k] - 1.0 / vq);
                rl_bar[k] -= w * 0.5 * (1.0 - diff * diff / vr[k] - vq / vr[k]);
            }
        }
        for j in 0..c {
            let dx = noise.xi[j] - r.mean[j];
            rm_bar[j] += w * dx / vr[j];
            rl_bar[j] -= w * 0.5 * (1.0 - dx * dx / vr[j]);
        }
        match (&arch.aux, r_tape) {
            (AuxSide::Global, _) => {
                add_into(&mut grad[params.segment_or_err(R_MEAN)?], &rm_bar);
                add_into(&mut grad[params.segment_or_err(R_LOG_VARIANCE)?], &rl_bar);
            }
            (AuxSide::Network(spec), Some(tape)) => {
                let range = params.segment_or_err(R_NET)?;
                let mut out_bar = rm_bar;
                out_bar.extend_from_slice(&rl_bar);
                let in_bar = backward(spec, &params.flat[range.clone()], tape, &out_bar, &mut grad[range]);
                if matches!(path, Path::Pathwise) {
                    add_into(&mut z_bar, &in_bar[arch.obs_dim..]);
                }
            }
            (AuxSide::Network(_), None) => unreachable!("network aux always records a tape"),
        }
    }

    match (arch.mode, path) {
        (BoundMode::Analytic, _) => {
            let g = model.grad_log_likelihood(x, &z);
            for i in 0..d {
                z_bar[i] += w * g[i];
                f_bar[i] -= w * f[i];
                f_bar[d + i] -= w * 0.5 * (f[d + i].exp() - 1.0);
            }
        }
        (BoundMode::General, Path::Pathwise) => {
            let g = model.grad_log_joint(x, &z);
            add_scaled(&mut z_bar, &g, w);
            if family.kind == FamilyKind::Gaussian {
                for i in 0..d {
                    let var = f[d + i].exp();
                    let r = (z[i] - f[i]) / var;
                    z_bar[i] += w * r;
                    f_bar[i] -= w * r;
                    f_bar[d + i] += w * 0.5 * (1.0 - r * (z[i] - f[i]));
                }
            }
        }
        (BoundMode::General, Path::Score { baseline }) => {
            // ∇ log q(z|l) = z − σ(l); the direct term of −log q plus the
            // score times the centered learning signal.
            let signal = terms.total() - baseline;
            for i in 0..d {
                let s = z[i] - sigmoid(f[i]);
                f_bar[i] += w * s * (signal - 1.0);
            }
        }
    }
    if check_finite_slice("z adjoint", &z_bar).is_err() || check_finite_slice("f adjoint", &f_bar).is_err() {
        return Err(Error::NonFinite { node: "latent adjoint" });
    }

    if matches!(path, Path::Pathwise) {
        match family.kind {
            FamilyKind::Gaussian => {
                for i in 0..d {
                    f_bar[i] += z_bar[i];
                    f_bar[d + i] += z_bar[i] * 0.5 * (0.5 * f[d + i]).exp() * noise.eps[i];
                }
            }
            FamilyKind::Delta => add_into(&mut f_bar, &z_bar),
            FamilyKind::Bernoulli => return Err(contract("Bernoulli mean-fields need the score-function path")),
        }
    }

    let mut q_bar = vec![0.0; q_flat.len()];
    match (&kernel, &cond_tape) {
        (Some(kp), Some((cond, tape))) => {
            add_into(&mut mean_bar, &f_bar);
            let sd = cond.variance.sqrt();
            var_bar += f_bar.iter().zip(&noise.eta).map(|(fb, e)| fb * e).sum::<f64>() / (2.0 * sd);
            let g = gp_conditional_pullback(&noise.xi, &data, kp, tape, &mean_bar, var_bar);
            let mut la = g.log_amplitude;
            if arch.fault == Some(Fault::KernelPullback) {
                la += 0.05;
            }
            grad[params.segment_or_err(LOG_AMPLITUDE)?.start] += la;
            add_into(&mut grad[params.segment_or_err(LOG_WEIGHTS)?], &g.log_weights);
            q_bar[..n_in].copy_from_slice(g.inputs.as_slice());
            q_bar[n_in..].copy_from_slice(g.outputs.as_slice());
        }
        _ => q_bar[n_in..].copy_from_slice(&f_bar),
    }
    match (&arch.q.net, &q_tape) {
        (Some(net), Some(tape)) => {
            backward(net, q_weights, tape, &q_bar, &mut grad[q_range]);
        }
        _ => add_into(&mut grad[q_range], &q_bar),
    }
    Ok(terms)
}

fn check_finite_slice(node: &'static str, v: &[f64]) -> Result<()> {
    crate::error::check_finite(node, v)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

/// Value and exact gradient of the single-sample bound at fixed noise.
pub fn objective_with_gradient(
    params: &ParameterVector,
    x: &[f64],
    model: &dyn TargetModel,
    arch: &Architecture,
    noise: &NoiseDraw,
) -> Result<GradientReport> {
    arch.check_params(params)?;
    if !arch.family.kind.is_reparameterizable() {
        return Err(Error::Unsupported(
            "pathwise gradient needs a reparameterizable mean-field; use the score-function estimator".into(),
        ));
    }
    let mut grad = vec![0.0; params.len()];
    let terms = accumulate(params, x, model, arch, noise, 1.0, Path::Pathwise, &mut grad)?;
    GradientReport::new(terms, grad, &params.layout)
}

/// Gradient of `scale · Σ_n total_n` over a minibatch, one noise draw per
/// observation. Terms are summed with the same scale.
pub fn batch_gradient(
    params: &ParameterVector,
    batch: &[&[f64]],
    model: &dyn TargetModel,
    arch: &Architecture,
    noises: &[NoiseDraw],
    scale: f64,
    baseline: Option<&mut ScoreBaseline>,
) -> Result<GradientReport> {
    arch.check_params(params)?;
    check_len("batch noise", batch.len(), noises.len())?;
    let mut grad = vec![0.0; params.len()];
    let mut sum = Terms::default();
    let mut baseline = baseline;
    for (x, noise) in batch.iter().zip(noises) {
        let path = if arch.family.kind.is_reparameterizable() {
            Path::Pathwise
        } else {
            Path::Score {
                baseline: baseline.as_ref().map_or(0.0, |b| b.value()),
            }
        };
        let t = accumulate(params, x, model, arch, noise, scale, path, &mut grad)?;
        if let (Path::Score { .. }, Some(b)) = (path, baseline.as_mut()) {
            b.observe(t.total());
        }
        sum.reconstruction += scale * t.reconstruction;
        sum.prior_kl += scale * t.prior_kl;
        sum.aux_penalty += scale * t.aux_penalty;
    }
    GradientReport::new(sum, grad, &params.layout)
}

/// Central differences `(f(p + h e_i) − f(p − h e_i)) / 2h`.
pub fn finite_diff_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Finite-difference step used by the gradient checker.
pub const FD_STEP: f64 = 1e-5;
/// Gradient entries are compared with `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Worst relative error per segment: `(segment, error, coordinate)`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], layout: &[Segment]) -> Vec<(String, f64, usize)> {
    layout
        .iter()
        .map(|s| {
            let mut worst = (0.0, s.offset);
            for i in s.range() {
                let e = relative_error(analytic[i], numeric[i]);
                if e > worst.0 || e.is_nan() {
                    worst = (e, i);
                }
            }
            (s.name.clone(), worst.0, worst.1)
        })
        .collect()
}

/// Scalar exponential moving average of the learning signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBaseline {
    pub decay: f64,
    value: Option<f64>,
}

pub const DEFAULT_BASELINE_DECAY: f64 = 0.9;

impl Default for ScoreBaseline {
    fn default() -> Self {
        Self::new(DEFAULT_BASELINE_DECAY)
    }
}

impl ScoreBaseline {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    /// Current baseline; zero before the first observation.
    pub fn value(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn observe(&mut self, signal: f64) {
        self.value = Some(match self.value {
            None => signal,
            Some(b) => self.decay * b + (1.0 - self.decay) * signal,
        });
    }
}

/// One score-function gradient sample at fixed noise. The learning signal
/// is the full integrand `log p(x,z) − log q(z|f) − aux`, since the
/// auxiliary model also depends on `z`.
pub fn score_function_sample(
    params: &ParameterVector,
    x: &[f64],
    model: &dyn TargetModel,
    arch: &Architecture,
    noise: &NoiseDraw,
    baseline: f64,
) -> Result<GradientReport> {
    arch.check_params(params)?;
    if arch.mode != BoundMode::General {
        return Err(contract("score-function estimator uses the general bound"));
    }
    let mut grad = vec![0.0; params.len()];
    let terms = accumulate(params, x, model, arch, noise, 1.0, Path::Score { baseline }, &mut grad)?;
    GradientReport::new(terms, grad, &params.layout)
}

/// Average of `n_samples` score-function samples with fresh noise; the
/// baseline (if any) is read before and updated after each sample.
pub fn score_function_gradient<R: Rng + ?Sized>(
    params: &ParameterVector,
    x: &[f64],
    model: &dyn TargetModel,
    arch: &Architecture,
    n_samples: usize,
    mut baseline: Option<&mut ScoreBaseline>,
    rng: &mut R,
) -> Result<GradientReport> {
    if n_samples == 0 {
        return Err(contract("score-function estimator needs at least one sample"));
    }
    let mut grad = vec![0.0; params.len()];
    let mut terms = Terms::default();
    let inv = 1.0 / n_samples as f64;
    for _ in 0..n_samples {
        let noise = arch.draw_noise(rng);
        let b = baseline.as_ref().map_or(0.0, |b| b.value());
        let r = score_function_sample(params, x, model, arch, &noise, b)?;
        if let Some(bl) = baseline.as_mut() {
            bl.observe(r.value);
        }
        add_scaled(&mut grad, &r.grad, inv);
        terms.reconstruction += inv * r.terms.reconstruction;
        terms.prior_kl += inv * r.terms.prior_kl;
        terms.aux_penalty += inv * r.terms.aux_penalty;
    }
    GradientReport::new(terms, grad, &params.layout)
}

/// `Σ_z q(z | f) · total(z)` at fixed `(ξ, η)`, summing over all `2^d`
/// outcomes of a Bernoulli mean-field.
pub fn enumerated_objective(
    params: &ParameterVector,
    x: &[f64],
    model: &dyn TargetModel,
    arch: &Architecture,
    xi: &[f64],
    eta: &[f64],
) -> Result<f64> {
    if arch.family.kind != FamilyKind::Bernoulli {
        return Err(contract("enumeration applies to Bernoulli mean-fields"));
    }
    let d = arch.family.latent_dim;
    if d > crate::targets::BERNOULLI_MAX_DIM {
        return Err(Error::Unsupported(format!("enumeration over 2^{d} outcomes")));
    }
    arch.check_params(params)?;
    let data = arch.variational_data(params, x)?;
    let lambda: Vec<f64> = match arch.kind {
        VariationalKind::Vgp => {
            let kernel = arch.kernel_params(params)?;
            let input = LatentInput::standard_normal(xi.to_vec());
            crate::vgp::reparam_map(&input, eta, &data, &kernel)?.raw
        }
        VariationalKind::MeanField => data.outputs.row(0).to_vec(),
    };
    let mut total = 0.0;
    for idx in 0..1usize << d {
        // Thresholds that reproduce outcome `idx` exactly.
        let eps: Vec<f64> = (0..d)
            .map(|i| {
                let p = sigmoid(lambda[i]);
                if (idx >> i) & 1 == 1 {
                    0.5 * p
                } else {
                    p + 0.5 * (1.0 - p)
                }
            })
            .collect();
        let z: Vec<f64> = (0..d).map(|i| ((idx >> i) & 1) as f64).collect();
        let prob = arch.family.log_density(&lambda, &z).exp();
        let noise = NoiseDraw {
            xi: xi.to_vec(),
            eta: eta.to_vec(),
            eps,
        };
        total += prob * objective_at_noise(params, x, model, arch, &noise)?.total();
    }
    Ok(total)
}

/// Score-function gradient at fixed `(ξ, η)` against the enumeration oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCheck {
    /// Central differences of [`enumerated_objective`].
    pub oracle: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_samples: usize,
}

impl ScoreCheck {
    /// Largest `|mean − oracle| / SE`; coordinates with zero spread must
    /// agree to `1e-9`.
    pub fn max_z(&self) -> f64 {
        self.oracle
            .iter()
            .zip(&self.mean)
            .zip(&self.std_error)
            .map(|((o, m), se)| {
                let d = (m - o).abs();
                if *se > 0.0 {
                    d / se
                } else if d < 1e-9 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

pub fn score_check<R: Rng + ?Sized>(
    params: &ParameterVector,
    x: &[f64],
    model: &dyn TargetModel,
    arch: &Architecture,
    xi: &[f64],
    eta: &[f64],
    n_samples: usize,
    mut baseline: Option<&mut ScoreBaseline>,
    rng: &mut R,
) -> Result<ScoreCheck> {
    if n_samples < 2 {
        return Err(contract("score check needs at least two samples"));
    }
    let mut probe = params.clone();
    let mut failure = None;
    let oracle = finite_diff_gradient(
        |flat| {
            probe.flat.copy_from_slice(flat);
            enumerated_objective(&probe, x, model, arch, xi, eta).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        &params.flat,
        FD_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let len = params.len();
    let mut mean = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    for k in 0..n_samples {
        let noise = NoiseDraw {
            xi: xi.to_vec(),
            eta: eta.to_vec(),
            eps: arch.family.draw_noise(rng),
        };
        let b = baseline.as_ref().map_or(0.0, |b| b.value());
        let r = score_function_sample(params, x, model, arch, &noise, b)?;
        if let Some(bl) = baseline.as_mut() {
            bl.observe(r.value);
        }
        let n = (k + 1) as f64;
        for ((m, s), g) in mean.iter_mut().zip(m2.iter_mut()).zip(&r.grad) {
            let delta = g - *m;
            *m += delta / n;
            *s += delta * (g - *m);
        }
    }
    let n = n_samples as f64;
    let std_error = m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect();
    Ok(ScoreCheck {
        oracle,
        mean,
        std_error,
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamSplitter;
    use crate::targets::make_conjugate_gaussian;

    #[test]
    fn pack_unpack_roundtrip() {
        let layout = layout_from(&[("a", 2), ("b", 0), ("c", 3)]);
        let p = ParameterVector::new(layout, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(ParameterVector::pack(&p.unpack()).unwrap(), p);
    }

    #[test]
    fn layout_must_cover_flat() {
        let layout = layout_from(&[("a", 2)]);
        assert!(ParameterVector::new(layout, vec![1.0]).is_err());
    }

    #[test]
    fn finite_diff_of_quadratic() {
        let p = [0.3, -1.2, 2.0];
        let g = finite_diff_gradient(|q| 0.5 * q.iter().map(|v| v * v).sum::<f64>(), &p, 1e-5);
        for (gi, pi) in g.iter().zip(p) {
            assert!((gi - pi).abs() < 1e-10);
        }
        let zero = finite_diff_gradient(|_| 3.0, &p, 1e-5);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn value_matches_plain_route() {
        let model = make_conjugate_gaussian(2, 0.5).unwrap();
        let family = MeanFieldFamily::new(FamilyKind::Gaussian, 2).unwrap();
        let arch = Architecture::vgp(family, 2, 2, 4, BoundMode::Analytic);
        let streams = StreamSplitter::new(3);
        let params = arch.init_params(&InitConfig::default(), &mut streams.stream("init"));
        let noise = arch.draw_noise(&mut streams.stream("train"));
        let x = [0.4, -0.3];
        let plain = objective_at_noise(&params, &x, &model, &arch, &noise).unwrap();
        let taped = objective_with_gradient(&params, &x, &model, &arch, &noise).unwrap();
        assert!((plain.total() - taped.value).abs() < 1e-12);
    }

    #[test]
    fn baseline_is_ema() {
        let mut b = ScoreBaseline::default();
        assert_eq!(b.value(), 0.0);
        b.observe(2.0);
        assert_eq!(b.value(), 2.0);
        b.observe(4.0);
        assert!((b.value() - 2.2).abs() < 1e-12);
    }
}
