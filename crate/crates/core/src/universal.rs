//! Quantile anchoring: condition the GP on `(s, P⁻¹(s))` at the grid points
//! `j / 2^k` of the unit hypercube, push uniform latent inputs through the
//! conditional, and measure how close the pushforward is to the target.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::kernel::{gp_conditional, KernelParams, VariationalData};
use crate::linalg::Matrix;
use crate::targets::TargetModel;

/// Grid endpoints are moved this far inside `[0, 1]` before the quantile.
pub const ENDPOINT_CLIP: f64 = 1e-4;
pub const MAX_LEVEL: u32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct GridAnchoring {
    pub k: u32,
    pub dim: usize,
    /// Clipped grid coordinates along one axis, `2^k + 1` values.
    pub grid: Vec<f64>,
    pub anchors: VariationalData,
}

fn axis(k: u32) -> Vec<f64> {
    let n = 1usize << k;
    (0..=n)
        .map(|j| (j as f64 / n as f64).clamp(ENDPOINT_CLIP, 1.0 - ENDPOINT_CLIP))
        .collect()
}

/// Anchors at every point of the product grid, outputs from the target's
/// quantile (Rosenblatt) map.
pub fn build_grid_anchors(k: u32, target: &dyn TargetModel) -> Result<GridAnchoring> {
    let dim = target.latent_dim();
    if dim == 0 || dim > 2 {
        return Err(Error::Unsupported(format!(
            "quantile anchoring supports 1 or 2 dimensions, target has {dim}"
        )));
    }
    if k > MAX_LEVEL + 2 {
        return Err(contract(format!("grid level {k} is too fine")));
    }
    let grid = axis(k);
    let g = grid.len();
    let points: Vec<Vec<f64>> = if dim == 1 {
        grid.iter().map(|&s| vec![s]).collect()
    } else {
        (0..g * g).map(|i| vec![grid[i % g], grid[i / g]]).collect()
    };
    let mut inputs = Vec::with_capacity(points.len() * dim);
    let mut outputs = Vec::with_capacity(points.len() * dim);
    for p in &points {
        let q = target
            .quantile(p)
            .ok_or_else(|| Error::Unsupported(format!("target `{}` has no quantile function", target.name())))?;
        inputs.extend_from_slice(p);
        outputs.extend_from_slice(&q);
    }
    let n = points.len();
    let anchors = VariationalData::new(
        Matrix::from_vec(n, dim, inputs)?,
        Matrix::from_vec(n, dim, outputs)?,
    )?;
    Ok(GridAnchoring { k, dim, grid, anchors })
}

/// How the experiment's kernel is chosen per level.
#[derive(Debug, Clone, PartialEq)]
pub enum AnchorKernel {
    /// The same kernel at every level.
    Fixed(KernelParams),
    /// `σ² = 1`, `ω = 4^k`: the length-scale equals the grid spacing.
    SpacingMatched,
}

impl AnchorKernel {
    pub fn unit() -> Self {
        Self::Fixed(KernelParams::unit_ard(1))
    }

    pub fn params(&self, k: u32, dim: usize) -> KernelParams {
        match self {
            Self::Fixed(p) => p.clone(),
            Self::SpacingMatched => KernelParams::ard(0.0, vec![k as f64 * 4f64.ln(); dim]),
        }
    }
}

/// Uniform `ξ` and standard-normal `η` shared across levels.
#[derive(Debug, Clone, PartialEq)]
pub struct PushforwardNoise {
    pub xi: Matrix,
    pub eta: Matrix,
}

impl PushforwardNoise {
    pub fn draw<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Self {
        let mut xi = Vec::with_capacity(n * dim);
        let mut eta = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for _ in 0..dim {
                xi.push(rng.random::<f64>());
            }
            for _ in 0..dim {
                eta.push(rng.sample::<f64, _>(StandardNormal));
            }
        }
        Self {
            xi: Matrix::from_vec(n, dim, xi).expect("shape"),
            eta: Matrix::from_vec(n, dim, eta).expect("shape"),
        }
    }
}

/// `n × dim` draws of the Delta-family VGP with hypercube inputs.
pub fn pushforward_samples<R: Rng + ?Sized>(
    anchoring: &GridAnchoring,
    params: &KernelParams,
    n: usize,
    rng: &mut R,
) -> Result<Matrix> {
    let noise = PushforwardNoise::draw(n, anchoring.dim, rng);
    pushforward_with_noise(anchoring, params, &noise)
}

pub fn pushforward_with_noise(
    anchoring: &GridAnchoring,
    params: &KernelParams,
    noise: &PushforwardNoise,
) -> Result<Matrix> {
    let n = noise.xi.rows();
    let mut out = Vec::with_capacity(n * anchoring.dim);
    for i in 0..n {
        let cond = gp_conditional(noise.xi.row(i), &anchoring.anchors, params)?;
        let sd = cond.variance.sqrt();
        for (m, e) in cond.mean.iter().zip(noise.eta.row(i)) {
            out.push(m + sd * e);
        }
    }
    Matrix::from_vec(n, anchoring.dim, out)
}

/// Largest `|mean(s_j) − P⁻¹(s_j)|` over the anchors.
pub fn max_anchor_error(anchoring: &GridAnchoring, params: &KernelParams) -> Result<f64> {
    let a = &anchoring.anchors;
    let mut worst: f64 = 0.0;
    for j in 0..a.len() {
        let cond = gp_conditional(a.inputs.row(j), a, params)?;
        for (m, t) in cond.mean.iter().zip(a.outputs.row(j)) {
            worst = worst.max((m - t).abs());
        }
    }
    Ok(worst)
}

/// `sup_x |F_n(x) − F(x)|`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(contract("KS statistic needs at least one sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsRow {
    pub k: u32,
    pub ks: f64,
    pub n: usize,
    /// Largest interpolation error at the anchors.
    pub anchor_error: f64,
}

/// KS distance of the level-`k` pushforward to the target for `k = 1..=k_max`.
/// All levels reuse one set of `(ξ, η)` draws.
pub fn convergence_experiment<R: Rng + ?Sized>(
    target: &dyn TargetModel,
    k_max: u32,
    kernel: &AnchorKernel,
    n: usize,
    rng: &mut R,
) -> Result<Vec<KsRow>> {
    if target.latent_dim() != 1 || target.cdf(0.5).is_none() {
        return Err(Error::Unsupported(format!(
            "target `{}` has no one-dimensional CDF",
            target.name()
        )));
    }
    if k_max == 0 || k_max > MAX_LEVEL {
        return Err(contract(format!("k_max must lie in 1..={MAX_LEVEL}")));
    }
    if n == 0 {
        return Err(contract("experiment needs at least one sample"));
    }
    let noise = PushforwardNoise::draw(n, 1, rng);
    let cdf = |x: f64| target.cdf(x).unwrap_or(f64::NAN);
    (1..=k_max)
        .map(|k| {
            let anchoring = build_grid_anchors(k, target)?;
            let params = kernel.params(k, 1);
            let samples = pushforward_with_noise(&anchoring, &params, &noise)?;
            Ok(KsRow {
                k,
                ks: ks_statistic(samples.as_slice(), cdf)?,
                n,
                anchor_error: max_anchor_error(&anchoring, &params)?,
            })
        })
        .collect()
}

/// `ks[k+1] ≤ ks[k] + tol` for consecutive rows.
pub fn is_monotone(ks: &[f64], tol: f64) -> bool {
    ks.windows(2).all(|w| w[1] <= w[0] + tol)
}
