//! The VGP generative process.
//!
//! 1. draw a latent input `ξ` (standard normal, or uniform on the unit hypercube);
//! 2. draw the mapping value `f(ξ) = mean(ξ) + sqrt(var(ξ)) · η` with `η ~ N(0, I)`;
//! 3. draw `z` from the mean-field family parameterized by `f(ξ)`.
//!
//! Gaussian mean-fields use `d' = 2d` outputs laid out as
//! `[μ_1..μ_d, logvar_1..logvar_d]`; Bernoulli uses one logit per coordinate;
//! Delta returns `f(ξ)` itself.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, contract, Result};
use crate::kernel::{gp_conditional, GpConditional, KernelParams, VariationalData};
use crate::special::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    StandardNormal,
    UnitHypercube,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentInput {
    pub xi: Vec<f64>,
    pub mode: InputMode,
}

impl LatentInput {
    pub fn standard_normal(xi: Vec<f64>) -> Self {
        Self {
            xi,
            mode: InputMode::StandardNormal,
        }
    }

    pub fn hypercube(xi: Vec<f64>) -> Self {
        Self {
            xi,
            mode: InputMode::UnitHypercube,
        }
    }

    /// `log q(ξ)` under the input's base distribution.
    pub fn log_density(&self) -> f64 {
        match self.mode {
            InputMode::StandardNormal => self
                .xi
                .iter()
                .map(|&x| crate::special::std_normal_logpdf(x))
                .sum(),
            InputMode::UnitHypercube => {
                if self.xi.iter().all(|x| (0.0..=1.0).contains(x)) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Gaussian,
    Bernoulli,
    Delta,
}

impl FamilyKind {
    pub fn params_per_coord(self) -> usize {
        match self {
            Self::Gaussian => 2,
            Self::Bernoulli | Self::Delta => 1,
        }
    }

    /// Whether `z` is a differentiable function of `(λ, ε)`.
    pub fn is_reparameterizable(self) -> bool {
        !matches!(self, Self::Bernoulli)
    }
}

/// The per-coordinate likelihood `q(z_i | λ_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeanFieldFamily {
    pub kind: FamilyKind,
    pub latent_dim: usize,
}

impl MeanFieldFamily {
    pub fn new(kind: FamilyKind, latent_dim: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(contract("mean-field family needs at least one coordinate"));
        }
        Ok(Self { kind, latent_dim })
    }

    pub fn params_per_coord(&self) -> usize {
        self.kind.params_per_coord()
    }

    /// GP output dimension `d' = d · params_per_coord`.
    pub fn output_dim(&self) -> usize {
        self.latent_dim * self.params_per_coord()
    }

    /// `log q(z | λ)`. Delta has no density and reports zero.
    pub fn log_density(&self, lambda: &[f64], z: &[f64]) -> f64 {
        let d = self.latent_dim;
        match self.kind {
            FamilyKind::Gaussian => (0..d)
                .map(|i| crate::special::normal_logpdf(z[i], lambda[i], lambda[d + i].exp()))
                .sum(),
            FamilyKind::Bernoulli => (0..d)
                .map(|i| {
                    let l = lambda[i];
                    if z[i] > 0.5 {
                        crate::special::log_sigmoid(l)
                    } else {
                        crate::special::log_sigmoid(-l)
                    }
                })
                .sum(),
            FamilyKind::Delta => 0.0,
        }
    }

    /// Draws the base noise `ε` for [`sample_meanfield`]: standard normal for
    /// Gaussian, uniform on `[0, 1)` for Bernoulli, zeros (no draws) for Delta.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            FamilyKind::Gaussian => (0..self.latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
            FamilyKind::Bernoulli => (0..self.latent_dim).map(|_| rng.random::<f64>()).collect(),
            FamilyKind::Delta => vec![0.0; self.latent_dim],
        }
    }
}

/// One reparameterized draw of the GP mapping at `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingSample {
    /// `f(ξ) = conditional.mean + sqrt(conditional.variance) · eta`.
    pub raw: Vec<f64>,
    pub conditional: GpConditional,
    pub eta: Vec<f64>,
}

/// Exogenous noise for one sample of the full generative process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    /// Draws `ξ` (standard normal, length `c`), `η` (length `d'`), and the
    /// family's base noise, in that order.
    pub fn sample<R: Rng + ?Sized>(
        input_dim: usize,
        family: &MeanFieldFamily,
        rng: &mut R,
    ) -> Self {
        let xi = draw_latent_input(input_dim, InputMode::StandardNormal, rng).xi;
        let eta = (0..family.output_dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let eps = family.draw_noise(rng);
        Self { xi, eta, eps }
    }
}

pub fn draw_latent_input<R: Rng + ?Sized>(c: usize, mode: InputMode, rng: &mut R) -> LatentInput {
    let xi = match mode {
        InputMode::StandardNormal => (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        InputMode::UnitHypercube => (0..c).map(|_| rng.random::<f64>()).collect(),
    };
    LatentInput { xi, mode }
}

/// Location-scale reparameterization of the GP mapping at `input`.
pub fn reparam_map(
    input: &LatentInput,
    eta: &[f64],
    data: &VariationalData,
    params: &KernelParams,
) -> Result<MappingSample> {
    check_len("reparam_map eta", data.output_dim(), eta.len())?;
    let conditional = gp_conditional(&input.xi, data, params)?;
    let scale = conditional.variance.sqrt();
    let raw = conditional
        .mean
        .iter()
        .zip(eta)
        .map(|(m, e)| m + scale * e)
        .collect();
    Ok(MappingSample {
        raw,
        conditional,
        eta: eta.to_vec(),
    })
}

/// Maps mean-field parameters and base noise to a latent sample.
pub fn sample_meanfield(family: &MeanFieldFamily, lambda: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    check_len("sample_meanfield lambda", family.output_dim(), lambda.len())?;
    check_len("sample_meanfield eps", family.latent_dim, eps.len())?;
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(contract("mean-field parameters must be finite"));
    }
    let d = family.latent_dim;
    Ok(match family.kind {
        FamilyKind::Gaussian => (0..d)
            .map(|i| lambda[i] + (0.5 * lambda[d + i]).exp() * eps[i])
            .collect(),
        FamilyKind::Bernoulli => (0..d)
            .map(|i| if eps[i] < sigmoid(lambda[i]) { 1.0 } else { 0.0 })
            .collect(),
        FamilyKind::Delta => lambda.to_vec(),
    })
}

/// One joint draw `(ξ, f(ξ), z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VgpDraw {
    pub input: LatentInput,
    pub mapping: MappingSample,
    pub z: Vec<f64>,
}

/// Runs the three-step generative process with standard-normal latent inputs.
pub fn generate<R: Rng + ?Sized>(
    data: &VariationalData,
    params: &KernelParams,
    family: &MeanFieldFamily,
    rng: &mut R,
) -> Result<VgpDraw> {
    check_len("generate output dim", family.output_dim(), data.output_dim())?;
    let noise = NoiseDraw::sample(params.dim(), family, rng);
    generate_from_noise(data, params, family, &noise)
}

/// The generative process at fixed exogenous noise.
pub fn generate_from_noise(
    data: &VariationalData,
    params: &KernelParams,
    family: &MeanFieldFamily,
    noise: &NoiseDraw,
) -> Result<VgpDraw> {
    check_len("generate output dim", family.output_dim(), data.output_dim())?;
    let input = LatentInput::standard_normal(noise.xi.clone());
    let mapping = reparam_map(&input, &noise.eta, data, params)?;
    let z = sample_meanfield(family, &mapping.raw, &noise.eps)?;
    Ok(VgpDraw { input, mapping, z })
}

/// Nearest-anchor mapping: returns `t_j` for the anchor input closest to `ξ`
/// in Euclidean distance, lowest index on ties.
pub fn nearest_neighbor_map(input: &LatentInput, data: &VariationalData) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(contract("nearest_neighbor_map needs at least one anchor"));
    }
    check_len("nearest_neighbor_map input", data.input_dim(), input.xi.len())?;
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for n in 0..data.len() {
        let dist: f64 = data
            .inputs
            .row(n)
            .iter()
            .zip(&input.xi)
            .map(|(s, x)| (s - x) * (s - x))
            .sum();
        if dist < best_dist {
            best = n;
            best_dist = dist;
        }
    }
    Ok(data.outputs.row(best).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::rng::StreamSplitter;

    fn anchors_1d(inputs: &[f64], outputs: &[f64]) -> VariationalData {
        VariationalData::new(
            Matrix::from_vec(inputs.len(), 1, inputs.to_vec()).unwrap(),
            Matrix::from_vec(outputs.len(), 1, outputs.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn hypercube_inputs_in_range() {
        let mut rng = StreamSplitter::new(1).stream("t");
        for _ in 0..1000 {
            let x = draw_latent_input(2, InputMode::UnitHypercube, &mut rng);
            assert!(x.xi.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn standard_normal_is_reproducible() {
        let a = draw_latent_input(3, InputMode::StandardNormal, &mut StreamSplitter::new(5).stream("x"));
        let b = draw_latent_input(3, InputMode::StandardNormal, &mut StreamSplitter::new(5).stream("x"));
        assert_eq!(a, b);
        assert_eq!(a.xi.len(), 3);
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = StreamSplitter::new(2).stream("m");
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| draw_latent_input(3, InputMode::StandardNormal, &mut rng).xi[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn zero_scale_at_anchor_ignores_eta() {
        let d = anchors_1d(&[-1.0, 0.5], &[2.0, -3.0]);
        let p = KernelParams::unit_ard(1);
        let m = reparam_map(&LatentInput::standard_normal(vec![0.5]), &[1.7], &d, &p).unwrap();
        assert!((m.raw[0] + 3.0).abs() < 1e-3);
        let expected = m.conditional.mean[0] + m.conditional.variance.sqrt() * 1.7;
        assert_eq!(m.raw[0], expected);
    }

    #[test]
    fn prior_mean_with_zero_eta() {
        let p = KernelParams::unit_ard(2);
        let m = reparam_map(
            &LatentInput::standard_normal(vec![0.1, 0.2]),
            &[0.0, 0.0, 0.0],
            &VariationalData::empty(2, 3),
            &p,
        )
        .unwrap();
        assert_eq!(m.raw, vec![0.0; 3]);
    }

    #[test]
    fn mapping_moments_match_conditional() {
        let d = anchors_1d(&[-1.0, 1.0], &[0.5, 1.5]);
        let p = KernelParams::ard(0.0, vec![0.0]);
        let input = LatentInput::standard_normal(vec![0.2]);
        let cond = gp_conditional(&input.xi, &d, &p).unwrap();
        let mut rng = StreamSplitter::new(9).stream("eta");
        let n = 100_000;
        let raws: Vec<f64> = (0..n)
            .map(|_| {
                let eta = [rng.sample::<f64, _>(StandardNormal)];
                reparam_map(&input, &eta, &d, &p).unwrap().raw[0]
            })
            .collect();
        let mean = raws.iter().sum::<f64>() / n as f64;
        let var = raws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (cond.variance / n as f64).sqrt();
        let se_var = cond.variance * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - cond.mean[0]).abs() < 3.0 * se_mean);
        assert!((var - cond.variance).abs() < 3.0 * se_var);
    }

    #[test]
    fn delta_returns_lambda() {
        let f = MeanFieldFamily::new(FamilyKind::Delta, 2).unwrap();
        assert_eq!(sample_meanfield(&f, &[1.5, -2.0], &[0.0, 0.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn gaussian_vanishing_scale() {
        let f = MeanFieldFamily::new(FamilyKind::Gaussian, 1).unwrap();
        let z = sample_meanfield(&f, &[0.75, -40.0], &[2.5]).unwrap();
        assert!((z[0] - 0.75).abs() < 1e-8);
    }

    #[test]
    fn bernoulli_frequency() {
        let f = MeanFieldFamily::new(FamilyKind::Bernoulli, 1).unwrap();
        let mut rng = StreamSplitter::new(3).stream("b");
        let n = 100_000;
        let ones: f64 = (0..n)
            .map(|_| sample_meanfield(&f, &[0.0], &f.draw_noise(&mut rng)).unwrap()[0])
            .sum();
        assert!((ones / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn non_finite_lambda_rejected() {
        let f = MeanFieldFamily::new(FamilyKind::Delta, 1).unwrap();
        assert!(sample_meanfield(&f, &[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn delta_at_anchor_returns_anchor_output() {
        let d = VariationalData::new(
            Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap(),
        )
        .unwrap();
        let p = KernelParams::unit_ard(2);
        let f = MeanFieldFamily::new(FamilyKind::Delta, 2).unwrap();
        let noise = NoiseDraw {
            xi: vec![1.0, 0.0],
            eta: vec![0.3, -0.8],
            eps: vec![0.0, 0.0],
        };
        let draw = generate_from_noise(&d, &p, &f, &noise).unwrap();
        assert!((draw.z[0] - 3.0).abs() < 1e-3 && (draw.z[1] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn generate_is_deterministic_for_seed() {
        let d = anchors_1d(&[0.0, 1.0], &[0.0, 1.0]);
        let p = KernelParams::unit_ard(1);
        let f = MeanFieldFamily::new(FamilyKind::Delta, 1).unwrap();
        let a = generate(&d, &p, &f, &mut StreamSplitter::new(4).stream("g")).unwrap();
        let b = generate(&d, &p, &f, &mut StreamSplitter::new(4).stream("g")).unwrap();
        assert_eq!(a.input.xi[0].to_bits(), b.input.xi[0].to_bits());
        assert_eq!(a.mapping.raw[0].to_bits(), b.mapping.raw[0].to_bits());
        assert_eq!(a.z[0].to_bits(), b.z[0].to_bits());
    }

    #[test]
    fn unconditioned_gaussian_family_is_zero_mean() {
        let f = MeanFieldFamily::new(FamilyKind::Gaussian, 2).unwrap();
        let p = KernelParams::unit_ard(2);
        let d = VariationalData::empty(2, 4);
        let mut rng = StreamSplitter::new(6).stream("g");
        let n = 100_000;
        let zs: Vec<f64> = (0..n).map(|_| generate(&d, &p, &f, &mut rng).unwrap().z[0]).collect();
        let mean = zs.iter().sum::<f64>() / n as f64;
        let var = zs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn nearest_neighbor_exact_and_tie() {
        let d = anchors_1d(&[-1.0, 1.0, 3.0], &[10.0, 20.0, 30.0]);
        let out = nearest_neighbor_map(&LatentInput::standard_normal(vec![1.0]), &d).unwrap();
        assert_eq!(out, vec![20.0]);
        let tie = nearest_neighbor_map(&LatentInput::standard_normal(vec![0.0]), &d).unwrap();
        assert_eq!(tie, vec![10.0]);
        assert!(nearest_neighbor_map(&LatentInput::standard_normal(vec![0.0]), &VariationalData::empty(1, 1)).is_err());
    }
}
