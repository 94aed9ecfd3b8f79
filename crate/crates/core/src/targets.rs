//! Target posteriors with exact reference quantities.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal as Gauss;

use crate::error::{check_len, contract, Error, Result};
use crate::linalg::{cholesky, solve_lower, solve_lower_transpose, Matrix};
use crate::quadrature::{for_each_normal_node, DEFAULT_NODES};
use crate::rng::StreamSplitter;
use crate::special::{log_sigmoid, log_sum_exp, normal_cdf, normal_logpdf, normal_ppf, sigmoid, LN_2PI};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
}

/// Gaussian reference `N(center, L Lᵀ)` used as the quadrature weight.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureReference {
    pub center: Vec<f64>,
    pub chol: Matrix,
    pub nodes: usize,
}

impl QuadratureReference {
    pub fn standard(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            chol: Matrix::identity(dim),
            nodes: DEFAULT_NODES,
        }
    }
}

/// A joint density `p(x, z) = p(x | z) p(z)`.
///
/// Targets without observations put the whole density in `log_prior` and
/// take `x` to be empty.
pub trait TargetModel: Send + Sync {
    fn name(&self) -> &str;
    fn latent_dim(&self) -> usize;
    fn obs_dim(&self) -> usize {
        0
    }

    fn log_likelihood(&self, x: &[f64], z: &[f64]) -> f64;
    fn grad_log_likelihood(&self, x: &[f64], z: &[f64]) -> Vec<f64>;
    fn log_prior(&self, z: &[f64]) -> f64;
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64>;

    fn log_joint(&self, x: &[f64], z: &[f64]) -> f64 {
        self.log_likelihood(x, z) + self.log_prior(z)
    }

    fn grad_log_joint(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut g = self.grad_log_likelihood(x, z);
        for (gi, pi) in g.iter_mut().zip(self.grad_log_prior(z)) {
            *gi += pi;
        }
        g
    }

    /// True when the prior is `N(0, I)`, so a Gaussian mean-field has a
    /// closed-form prior KL.
    fn analytic_prior_kl(&self) -> bool {
        false
    }

    /// Latents live on `{0, 1}^d`.
    fn is_discrete(&self) -> bool {
        false
    }

    fn exact_log_evidence(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn exact_moments(&self, _x: &[f64]) -> Option<Moments> {
        None
    }

    /// Inverse CDF (Rosenblatt transform for `d > 1`) of the posterior.
    fn quantile(&self, _u: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Posterior CDF of a one-dimensional target.
    fn cdf(&self, _z: f64) -> Option<f64> {
        None
    }

    fn quadrature_reference(&self) -> QuadratureReference {
        QuadratureReference::standard(self.latent_dim())
    }
}

fn std_normal_grad(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| -v).collect()
}

fn std_normal_log(z: &[f64]) -> f64 {
    z.iter().map(|v| -0.5 * (v * v + LN_2PI)).sum()
}

/// `N(0, I_d)` with no observations.
#[derive(Debug, Clone)]
pub struct StandardNormal {
    dim: usize,
}

pub fn make_standard_normal(dim: usize) -> Result<StandardNormal> {
    if dim == 0 {
        return Err(contract("standard normal target needs d >= 1"));
    }
    Ok(StandardNormal { dim })
}

impl TargetModel for StandardNormal {
    fn name(&self) -> &str {
        "standard_normal"
    }
    fn latent_dim(&self) -> usize {
        self.dim
    }
    fn log_likelihood(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
    fn grad_log_likelihood(&self, _x: &[f64], z: &[f64]) -> Vec<f64> {
        vec![0.0; z.len()]
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        std_normal_log(z)
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        std_normal_grad(z)
    }
    fn analytic_prior_kl(&self) -> bool {
        true
    }
    fn exact_log_evidence(&self, _x: &[f64]) -> Option<f64> {
        Some(0.0)
    }
    fn exact_moments(&self, _x: &[f64]) -> Option<Moments> {
        Some(Moments {
            mean: vec![0.0; self.dim],
            covariance: Matrix::identity(self.dim),
        })
    }
    fn quantile(&self, u: &[f64]) -> Option<Vec<f64>> {
        Some(u.iter().map(|&p| normal_ppf(p)).collect())
    }
    fn cdf(&self, z: f64) -> Option<f64> {
        (self.dim == 1).then(|| normal_cdf(z))
    }
}

/// Uniform on `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Uniform01;

pub fn make_uniform() -> Uniform01 {
    Uniform01
}

impl TargetModel for Uniform01 {
    fn name(&self) -> &str {
        "uniform"
    }
    fn latent_dim(&self) -> usize {
        1
    }
    fn log_likelihood(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
    fn grad_log_likelihood(&self, _x: &[f64], z: &[f64]) -> Vec<f64> {
        vec![0.0; z.len()]
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        if (0.0..=1.0).contains(&z[0]) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        vec![0.0; z.len()]
    }
    fn exact_log_evidence(&self, _x: &[f64]) -> Option<f64> {
        Some(0.0)
    }
    fn exact_moments(&self, _x: &[f64]) -> Option<Moments> {
        Some(Moments {
            mean: vec![0.5],
            covariance: Matrix::from_vec(1, 1, vec![1.0 / 12.0]).ok()?,
        })
    }
    fn quantile(&self, u: &[f64]) -> Option<Vec<f64>> {
        Some(u.to_vec())
    }
    fn cdf(&self, z: f64) -> Option<f64> {
        Some(z.clamp(0.0, 1.0))
    }
}

/// Zero-mean bivariate Gaussian with unit variances and correlation `rho`.
#[derive(Debug, Clone)]
pub struct CorrelatedGaussian {
    rho: f64,
}

pub fn make_correlated_gaussian(rho: f64) -> Result<CorrelatedGaussian> {
    if !(rho.abs() < 1.0) {
        return Err(contract(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    Ok(CorrelatedGaussian { rho })
}

impl CorrelatedGaussian {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn covariance(&self) -> Matrix {
        Matrix::from_rows(&[vec![1.0, self.rho], vec![self.rho, 1.0]]).expect("2x2")
    }
}

impl TargetModel for CorrelatedGaussian {
    fn name(&self) -> &str {
        "correlated_gaussian"
    }
    fn latent_dim(&self) -> usize {
        2
    }
    fn log_likelihood(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
    fn grad_log_likelihood(&self, _x: &[f64], _z: &[f64]) -> Vec<f64> {
        vec![0.0; 2]
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        let r = self.rho;
        let det = 1.0 - r * r;
        let q = (z[0] * z[0] - 2.0 * r * z[0] * z[1] + z[1] * z[1]) / det;
        -0.5 * q - LN_2PI - 0.5 * det.ln()
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        let r = self.rho;
        let det = 1.0 - r * r;
        vec![-(z[0] - r * z[1]) / det, -(z[1] - r * z[0]) / det]
    }
    fn exact_log_evidence(&self, _x: &[f64]) -> Option<f64> {
        Some(0.0)
    }
    fn exact_moments(&self, _x: &[f64]) -> Option<Moments> {
        Some(Moments {
            mean: vec![0.0; 2],
            covariance: self.covariance(),
        })
    }
    fn quantile(&self, u: &[f64]) -> Option<Vec<f64>> {
        if u.len() != 2 {
            return None;
        }
        let z1 = normal_ppf(u[0]);
        let z2 = self.rho * z1 + (1.0 - self.rho * self.rho).sqrt() * normal_ppf(u[1]);
        Some(vec![z1, z2])
    }
    fn quadrature_reference(&self) -> QuadratureReference {
        QuadratureReference {
            center: vec![0.0; 2],
            chol: cholesky(&self.covariance()).expect("|rho| < 1"),
            nodes: DEFAULT_NODES,
        }
    }
}

/// One-dimensional Gaussian mixture.
#[derive(Debug, Clone)]
pub struct Gmm1d {
    weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

pub fn make_gmm_1d(weights: &[f64], means: &[f64], sds: &[f64]) -> Result<Gmm1d> {
    let k = weights.len();
    if k == 0 {
        return Err(contract("mixture needs at least one component"));
    }
    check_len("mixture means", k, means.len())?;
    check_len("mixture sds", k, sds.len())?;
    if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract("mixture weights must be positive and sum to 1"));
    }
    if sds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || means.iter().any(|m| !m.is_finite()) {
        return Err(contract("mixture means must be finite and sds positive"));
    }
    Ok(Gmm1d {
        weights: weights.to_vec(),
        means: means.to_vec(),
        sds: sds.to_vec(),
    })
}

impl Gmm1d {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    fn log_terms(&self, z: f64) -> Vec<f64> {
        (0..self.components())
            .map(|k| self.weights[k].ln() + normal_logpdf(z, self.means[k], self.sds[k] * self.sds[k]))
            .collect()
    }

    fn mixture_cdf(&self, z: f64) -> f64 {
        (0..self.components())
            .map(|k| self.weights[k] * normal_cdf((z - self.means[k]) / self.sds[k]))
            .sum()
    }

    fn mean_var(&self) -> (f64, f64) {
        let mean: f64 = (0..self.components()).map(|k| self.weights[k] * self.means[k]).sum();
        let second: f64 = (0..self.components())
            .map(|k| self.weights[k] * (self.sds[k] * self.sds[k] + self.means[k] * self.means[k]))
            .sum();
        (mean, second - mean * mean)
    }

    /// Inverse CDF by bisection on the monotone mixture CDF.
    pub fn quantile_1d(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..self.components() {
            lo = lo.min(self.means[k] - 40.0 * self.sds[k]);
            hi = hi.max(self.means[k] + 40.0 * self.sds[k]);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if self.mixture_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

impl TargetModel for Gmm1d {
    fn name(&self) -> &str {
        "gmm1d"
    }
    fn latent_dim(&self) -> usize {
        1
    }
    fn log_likelihood(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
    fn grad_log_likelihood(&self, _x: &[f64], _z: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(z[0]))
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        let terms = self.log_terms(z[0]);
        let lse = log_sum_exp(&terms);
        let g = (0..self.components())
            .map(|k| {
                let resp = (terms[k] - lse).exp();
                -resp * (z[0] - self.means[k]) / (self.sds[k] * self.sds[k])
            })
            .sum();
        vec![g]
    }
    fn exact_log_evidence(&self, _x: &[f64]) -> Option<f64> {
        Some(0.0)
    }
    fn exact_moments(&self, _x: &[f64]) -> Option<Moments> {
        let (m, v) = self.mean_var();
        Some(Moments {
            mean: vec![m],
            covariance: Matrix::from_vec(1, 1, vec![v]).ok()?,
        })
    }
    fn quantile(&self, u: &[f64]) -> Option<Vec<f64>> {
        (u.len() == 1).then(|| vec![self.quantile_1d(u[0])])
    }
    fn cdf(&self, z: f64) -> Option<f64> {
        Some(self.mixture_cdf(z))
    }
    fn quadrature_reference(&self) -> QuadratureReference {
        let (m, v) = self.mean_var();
        QuadratureReference {
            center: vec![m],
            chol: Matrix::from_vec(1, 1, vec![v.sqrt()]).expect("1x1"),
            nodes: 256,
        }
    }
}

/// `z₁ ~ N(0, 1)`, `z₂ | z₁ ~ N(b z₁², 0.5²)`.
#[derive(Debug, Clone)]
pub struct Banana {
    b: f64,
}

const BANANA_SD: f64 = 0.5;

pub fn make_banana(b: f64) -> Result<Banana> {
    if !b.is_finite() {
        return Err(contract("banana curvature must be finite"));
    }
    Ok(Banana { b })
}

impl TargetModel for Banana {
    fn name(&self) -> &str {
        "banana"
    }
    fn latent_dim(&self) -> usize {
        2
    }
    fn log_likelihood(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
    fn grad_log_likelihood(&self, _x: &[f64], _z: &[f64]) -> Vec<f64> {
        vec![0.0; 2]
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        normal_logpdf(z[0], 0.0, 1.0) + normal_logpdf(z[1] - self.b * z[0] * z[0], 0.0, BANANA_SD * BANANA_SD)
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        let r = (z[1] - self.b * z[0] * z[0]) / (BANANA_SD * BANANA_SD);
        vec![-z[0] + r * 2.0 * self.b * z[0], -r]
    }
    fn exact_log_evidence(&self, _x: &[f64]) -> Option<f64> {
        Some(0.0)
    }
    fn quadrature_reference(&self) -> QuadratureReference {
        let var2 = BANANA_SD * BANANA_SD + 2.0 * self.b * self.b;
        QuadratureReference {
            center: vec![0.0, self.b],
            chol: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, var2.sqrt()]]).expect("2x2"),
            nodes: DEFAULT_NODES,
        }
    }
}

/// One-layer deep latent Gaussian model:
/// `z ~ N(0, I_d)`, `x_j | z ~ Bernoulli(sigmoid(W_j · z + b_j))`.
#[derive(Debug, Clone)]
pub struct TinyDlgm {
    weights: Matrix,
    bias: Vec<f64>,
}

pub const DLGM_MAX_PIXELS: usize = 64;
pub const DLGM_MAX_LATENT: usize = 4;
/// Largest latent dimension for which the evidence is computed by quadrature.
pub const DLGM_MAX_QUADRATURE: usize = 3;

/// Generator weights drawn from a fixed seed: `W ~ N(0, 1.5²)`, `b ~ N(0, 0.5²)`.
pub fn make_tiny_dlgm(pixels: usize, d: usize, seed: u64) -> Result<TinyDlgm> {
    if pixels == 0 || pixels > DLGM_MAX_PIXELS {
        return Err(contract(format!("tiny DLGM needs 1..={DLGM_MAX_PIXELS} pixels")));
    }
    if d == 0 || d > DLGM_MAX_LATENT {
        return Err(Error::Unsupported(format!(
            "tiny DLGM latent dimension {d} outside 1..={DLGM_MAX_LATENT}"
        )));
    }
    let mut rng = StreamSplitter::new(seed).stream("generator");
    let w: Vec<f64> = (0..pixels * d)
        .map(|_| 1.5 * rng.sample::<f64, _>(Gauss))
        .collect();
    let b: Vec<f64> = (0..pixels)
        .map(|_| 0.5 * rng.sample::<f64, _>(Gauss))
        .collect();
    TinyDlgm::new(Matrix::from_vec(pixels, d, w)?, b)
}

impl TinyDlgm {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        check_len("DLGM bias", weights.rows(), bias.len())?;
        if weights.cols() == 0 || weights.cols() > DLGM_MAX_LATENT {
            return Err(Error::Unsupported(format!(
                "tiny DLGM latent dimension {} outside 1..={DLGM_MAX_LATENT}",
                weights.cols()
            )));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(contract("DLGM generator must be finite"));
        }
        Ok(Self { weights, bias })
    }

    pub fn pixels(&self) -> usize {
        self.weights.rows()
    }

    pub fn generator(&self) -> (&Matrix, &[f64]) {
        (&self.weights, &self.bias)
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.pixels())
            .map(|j| self.bias[j] + crate::linalg::dot(self.weights.row(j), z))
            .collect()
    }

    /// Gauss–Hermite reference centred at the posterior mode with the
    /// Laplace covariance; a fixed `N(0, I)` grid misses sharp posteriors.
    fn laplace_reference(&self, x: &[f64]) -> Option<QuadratureReference> {
        let d = self.latent_dim();
        let precision = |z: &[f64]| {
            let mut h = Matrix::identity(d);
            for (j, l) in self.logits(z).into_iter().enumerate() {
                let s = sigmoid(l) * (1.0 - sigmoid(l));
                let w = self.weights.row(j);
                for a in 0..d {
                    for b in 0..d {
                        h[(a, b)] += s * w[a] * w[b];
                    }
                }
            }
            h
        };
        let mut z = vec![0.0; d];
        for _ in 0..100 {
            let l = cholesky(&precision(&z)).ok()?;
            let g = self.grad_log_joint(x, &z);
            let step = solve_lower_transpose(&l, &solve_lower(&l, &g));
            let current = self.log_joint(x, &z);
            let mut t = 1.0;
            let mut next: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + b).collect();
            while self.log_joint(x, &next) < current && t > 1e-8 {
                t *= 0.5;
                next = z.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            }
            let moved = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
            z = next;
            if moved < 1e-12 {
                break;
            }
        }
        let l = cholesky(&precision(&z)).ok()?;
        let mut cov = Matrix::zeros(d, d);
        for c in 0..d {
            let mut e = vec![0.0; d];
            e[c] = 1.0;
            let col = solve_lower_transpose(&l, &solve_lower(&l, &e));
            for r in 0..d {
                cov[(r, c)] = col[r];
            }
        }
        Some(QuadratureReference {
            center: z,
            chol: cholesky(&cov).ok()?,
            nodes: DEFAULT_NODES,
        })
    }

    /// `n` observations drawn from the generative model.
    pub fn sample_dataset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let d = self.weights.cols();
        let mut data = Vec::with_capacity(n * self.pixels());
        for _ in 0..n {
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(Gauss)).collect();
            for l in self.logits(&z) {
                let u: f64 = rng.random();
                data.push(if u < sigmoid(l) { 1.0 } else { 0.0 });
            }
        }
        Matrix::from_vec(n, self.pixels(), data).expect("shape")
    }
}

impl TargetModel for TinyDlgm {
    fn name(&self) -> &str {
        "tiny_dlgm"
    }
    fn latent_dim(&self) -> usize {
        self.weights.cols()
    }
    fn obs_dim(&self) -> usize {
        self.pixels()
    }
    fn log_likelihood(&self, x: &[f64], z: &[f64]) -> f64 {
        self.logits(z)
            .iter()
            .zip(x)
            .map(|(&l, &xj)| if xj > 0.5 { log_sigmoid(l) } else { log_sigmoid(-l) })
            .sum()
    }
    fn grad_log_likelihood(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.latent_dim()];
        for (j, l) in self.logits(z).into_iter().enumerate() {
            let r = x[j] - sigmoid(l);
            for (gi, w) in g.iter_mut().zip(self.weights.row(j)) {
                *gi += r * w;
            }
        }
        g
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        std_normal_log(z)
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        std_normal_grad(z)
    }
    fn analytic_prior_kl(&self) -> bool {
        true
    }
    fn exact_log_evidence(&self, x: &[f64]) -> Option<f64> {
        if self.latent_dim() > DLGM_MAX_QUADRATURE || x.len() != self.pixels() {
            return None;
        }
        let reference = self.laplace_reference(x)?;
        reference_quadrature(self, x, &reference).ok().map(|(lse, _)| lse)
    }
    fn exact_moments(&self, x: &[f64]) -> Option<Moments> {
        if self.latent_dim() > DLGM_MAX_QUADRATURE || x.len() != self.pixels() {
            return None;
        }
        let reference = self.laplace_reference(x)?;
        reference_quadrature(self, x, &reference).ok().map(|(_, m)| m)
    }
}

/// Discrete target on `{0, 1}^d` with unnormalized log-mass `table[Σ z_i 2^i]`.
#[derive(Debug, Clone)]
pub struct BernoulliTable {
    dim: usize,
    table: Vec<f64>,
}

pub const BERNOULLI_MAX_DIM: usize = 10;

pub fn make_bernoulli_posterior(d: usize, logits_table: &[f64]) -> Result<BernoulliTable> {
    if d == 0 || d > BERNOULLI_MAX_DIM {
        return Err(Error::Unsupported(format!(
            "Bernoulli table dimension {d} outside 1..={BERNOULLI_MAX_DIM}"
        )));
    }
    check_len("Bernoulli table", 1 << d, logits_table.len())?;
    if logits_table.iter().any(|v| !v.is_finite()) {
        return Err(contract("Bernoulli table entries must be finite"));
    }
    Ok(BernoulliTable {
        dim: d,
        table: logits_table.to_vec(),
    })
}

impl BernoulliTable {
    pub fn index(z: &[f64]) -> usize {
        z.iter()
            .enumerate()
            .map(|(i, &v)| usize::from(v > 0.5) << i)
            .sum()
    }

    pub fn outcome(&self, index: usize) -> Vec<f64> {
        (0..self.dim).map(|i| ((index >> i) & 1) as f64).collect()
    }

    /// Exact marginals `P(z_i = 1)` by enumeration.
    pub fn marginals(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.table);
        let mut m = vec![0.0; self.dim];
        for (idx, &lv) in self.table.iter().enumerate() {
            let p = (lv - lse).exp();
            for (i, mi) in m.iter_mut().enumerate() {
                if (idx >> i) & 1 == 1 {
                    *mi += p;
                }
            }
        }
        m
    }
}

impl TargetModel for BernoulliTable {
    fn name(&self) -> &str {
        "bernoulli"
    }
    fn latent_dim(&self) -> usize {
        self.dim
    }
    fn log_likelihood(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
    fn grad_log_likelihood(&self, _x: &[f64], z: &[f64]) -> Vec<f64> {
        vec![0.0; z.len()]
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        self.table[Self::index(z)]
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        vec![0.0; z.len()]
    }
    fn is_discrete(&self) -> bool {
        true
    }
    fn exact_log_evidence(&self, _x: &[f64]) -> Option<f64> {
        Some(log_sum_exp(&self.table))
    }
    fn exact_moments(&self, x: &[f64]) -> Option<Moments> {
        oracle_moments(self, x).ok()
    }
}

/// `z ~ N(0, I_d)`, `x | z ~ N(z, s² I_d)`.
#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    dim: usize,
    noise_var: f64,
}

pub fn make_conjugate_gaussian(d: usize, noise_var: f64) -> Result<ConjugateGaussian> {
    if d == 0 {
        return Err(contract("conjugate target needs d >= 1"));
    }
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(contract("noise variance must be positive"));
    }
    Ok(ConjugateGaussian { dim: d, noise_var })
}

impl ConjugateGaussian {
    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}

impl TargetModel for ConjugateGaussian {
    fn name(&self) -> &str {
        "conjugate_gaussian"
    }
    fn latent_dim(&self) -> usize {
        self.dim
    }
    fn obs_dim(&self) -> usize {
        self.dim
    }
    fn log_likelihood(&self, x: &[f64], z: &[f64]) -> f64 {
        x.iter().zip(z).map(|(&xi, &zi)| normal_logpdf(xi, zi, self.noise_var)).sum()
    }
    fn grad_log_likelihood(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        x.iter().zip(z).map(|(&xi, &zi)| (xi - zi) / self.noise_var).collect()
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        std_normal_log(z)
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        std_normal_grad(z)
    }
    fn analytic_prior_kl(&self) -> bool {
        true
    }
    fn exact_log_evidence(&self, x: &[f64]) -> Option<f64> {
        (x.len() == self.dim).then(|| x.iter().map(|&xi| normal_logpdf(xi, 0.0, 1.0 + self.noise_var)).sum())
    }
    fn exact_moments(&self, x: &[f64]) -> Option<Moments> {
        if x.len() != self.dim {
            return None;
        }
        let shrink = 1.0 / (1.0 + self.noise_var);
        let mut cov = Matrix::identity(self.dim);
        for i in 0..self.dim {
            cov[(i, i)] = self.noise_var * shrink;
        }
        Some(Moments {
            mean: x.iter().map(|xi| xi * shrink).collect(),
            covariance: cov,
        })
    }
}

/// Posterior mean and covariance by brute force: enumeration over `{0,1}^d`
/// for discrete targets, tensor-grid Gauss–Hermite (against the target's
/// quadrature reference) for continuous targets with `d ≤ 3`.
pub fn oracle_moments(target: &dyn TargetModel, x: &[f64]) -> Result<Moments> {
    let d = target.latent_dim();
    let mut log_w = Vec::new();
    let mut points: Vec<Vec<f64>> = Vec::new();
    if target.is_discrete() {
        if d > BERNOULLI_MAX_DIM {
            return Err(Error::Unsupported(format!("enumeration over 2^{d} outcomes")));
        }
        for idx in 0..1usize << d {
            let z: Vec<f64> = (0..d).map(|i| ((idx >> i) & 1) as f64).collect();
            log_w.push(target.log_joint(x, &z));
            points.push(z);
        }
    } else {
        if d > 3 {
            return Err(Error::Unsupported(format!(
                "quadrature oracle limited to d <= 3, target has d = {d}"
            )));
        }
        return reference_quadrature(target, x, &target.quadrature_reference()).map(|(_, m)| m);
    }
    weighted_moments(d, &log_w, &points).map(|(_, m)| m)
}

/// Log normalizer and moments of `p(x, ·)` by tensor Gauss–Hermite against
/// `reference`.
fn reference_quadrature(target: &dyn TargetModel, x: &[f64], reference: &QuadratureReference) -> Result<(f64, Moments)> {
    let d = target.latent_dim();
    let mut log_w = Vec::new();
    let mut points: Vec<Vec<f64>> = Vec::new();
    let log_det: f64 = (0..d).map(|i| reference.chol[(i, i)].ln()).sum();
    for_each_normal_node(d, reference.nodes, |u, lw| {
        if !lw.is_finite() {
            return;
        }
        let mut z = reference.center.clone();
        for i in 0..d {
            for j in 0..=i {
                z[i] += reference.chol[(i, j)] * u[j];
            }
        }
        // p̃(z) / N(z; c, LLᵀ) in log space.
        let log_ref = std_normal_log(u) - log_det;
        log_w.push(lw + target.log_joint(x, &z) - log_ref);
        points.push(z);
    });
    weighted_moments(d, &log_w, &points)
}

fn weighted_moments(d: usize, log_w: &[f64], points: &[Vec<f64>]) -> Result<(f64, Moments)> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(contract("oracle normalizer is not finite"));
    }
    let mut mean = vec![0.0; d];
    let probs: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
    for (p, z) in probs.iter().zip(points) {
        for i in 0..d {
            mean[i] += p * z[i];
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for (p, z) in probs.iter().zip(points) {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += p * (z[i] - mean[i]) * (z[j] - mean[j]);
            }
        }
    }
    Ok((lse, Moments { mean, covariance: cov }))
}

/// Names accepted by [`build_target`].
pub const KNOWN_TARGETS: &[&str] = &[
    "standard_normal",
    "uniform",
    "correlated_gaussian",
    "gmm1d",
    "banana",
    "tiny_dlgm",
    "bernoulli",
    "conjugate_gaussian",
];

/// Parameters for building a zoo target by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub name: String,
    pub dim: usize,
    pub rho: f64,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub curvature: f64,
    pub pixels: usize,
    pub generator_seed: u64,
    pub table: Vec<f64>,
    pub noise_var: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            name: String::from("conjugate_gaussian"),
            dim: 1,
            rho: 0.9,
            weights: vec![0.5, 0.5],
            means: vec![-2.0, 2.0],
            sds: vec![0.5, 0.5],
            curvature: 1.0,
            pixels: 16,
            generator_seed: 0,
            table: Vec::new(),
            noise_var: 1.0,
        }
    }
}

pub fn build_target(spec: &TargetSpec) -> Result<Box<dyn TargetModel>> {
    Ok(match spec.name.as_str() {
        "standard_normal" => Box::new(make_standard_normal(spec.dim)?),
        "uniform" => Box::new(make_uniform()),
        "correlated_gaussian" => Box::new(make_correlated_gaussian(spec.rho)?),
        "gmm1d" => Box::new(make_gmm_1d(&spec.weights, &spec.means, &spec.sds)?),
        "banana" => Box::new(make_banana(spec.curvature)?),
        "tiny_dlgm" => Box::new(make_tiny_dlgm(spec.pixels, spec.dim, spec.generator_seed)?),
        "bernoulli" => Box::new(make_bernoulli_posterior(spec.dim, &spec.table)?),
        "conjugate_gaussian" => Box::new(make_conjugate_gaussian(spec.dim, spec.noise_var)?),
        other => {
            return Err(Error::Unsupported(format!(
                "unknown target `{other}`; known targets: {}",
                KNOWN_TARGETS.join(", ")
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlated_gaussian_rejects_unit_rho() {
        assert!(make_correlated_gaussian(1.0).is_err());
        assert!(make_correlated_gaussian(-1.2).is_err());
        assert!(make_correlated_gaussian(f64::NAN).is_err());
    }

    #[test]
    fn gmm_single_component_is_gaussian() {
        let g = make_gmm_1d(&[1.0], &[1.0], &[2.0]).unwrap();
        for p in [0.1, 0.5, 0.9] {
            assert!((g.quantile_1d(p) - (1.0 + 2.0 * normal_ppf(p))).abs() < 1e-9);
        }
    }

    #[test]
    fn gmm_rejects_bad_weights() {
        assert!(make_gmm_1d(&[0.4, 0.4], &[0.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(make_gmm_1d(&[1.2, -0.2], &[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn symmetric_gmm_median_is_midpoint() {
        let g = make_gmm_1d(&[0.5, 0.5], &[-1.0, 3.0], &[0.7, 0.7]).unwrap();
        assert!((g.quantile_1d(0.5) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dlgm_refuses_large_latent() {
        assert!(matches!(make_tiny_dlgm(4, 5, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn bernoulli_index_roundtrip() {
        let t = make_bernoulli_posterior(3, &[0.0; 8]).unwrap();
        for idx in 0..8 {
            assert_eq!(BernoulliTable::index(&t.outcome(idx)), idx);
        }
    }

    #[test]
    fn unknown_target_lists_known_names() {
        let spec = TargetSpec {
            name: "nope".into(),
            ..TargetSpec::default()
        };
        let err = build_target(&spec).err().unwrap();
        assert!(format!("{err}").contains("banana"));
    }
}
