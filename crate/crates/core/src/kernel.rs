//! Kernels, kernel matrices, and the GP conditional at a single query point.
//!
//! The ARD kernel is `k(a, b) = σ² exp(-½ Σ_j ω_j (a_j - b_j)²)`, stored in
//! log space (`log σ²`, `log ω_j`) so unconstrained gradient steps keep both
//! positive. The linear kernel is `k(a, b) = aᵀb`.
//!
//! The conditional moments at a query `ξ` given variational data `(S, T)` are
//!
//! ```text
//! mean_i   = k_ξS K_SS⁻¹ t_i
//! variance = max(k(ξ, ξ) - k_ξS K_SS⁻¹ k_Sξ, 0) + jitter
//! ```
//!
//! with one kernel shared by every output column. `K_SS` carries `jitter` on
//! its diagonal, and the same jitter is added to the predictive variance as a
//! nugget so the variance never collapses to zero.

use alloc::vec;
use alloc::vec::Vec;


#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use crate::error::{check_len, contract, Result};
use crate::linalg::{
    cholesky, cholesky_pullback, dot, solve_lower, solve_lower_matrix, solve_lower_transpose,
    solve_lower_transpose_matrix, Matrix,
};

pub const DEFAULT_JITTER_REL: f64 = 1e-8;
pub const MAX_JITTER_REL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Ard,
    Linear,
}

/// Kernel hyperparameters.
///
/// `jitter_rel` is relative to the amplitude: the absolute jitter is
/// `jitter_rel · σ²`. For the linear kernel `σ²` only scales the jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub kind: KernelKind,
    pub log_amplitude: f64,
    pub log_weights: Vec<f64>,
    pub jitter_rel: f64,
}

impl KernelParams {
    pub fn ard(log_amplitude: f64, log_weights: Vec<f64>) -> Self {
        Self {
            kind: KernelKind::Ard,
            log_amplitude,
            log_weights,
            jitter_rel: DEFAULT_JITTER_REL,
        }
    }

    /// Unit-amplitude, unit-weight ARD kernel over `dim` inputs.
    pub fn unit_ard(dim: usize) -> Self {
        Self::ard(0.0, vec![0.0; dim])
    }

    pub fn linear(dim: usize) -> Self {
        Self {
            kind: KernelKind::Linear,
            log_amplitude: 0.0,
            log_weights: vec![0.0; dim],
            jitter_rel: DEFAULT_JITTER_REL,
        }
    }

    pub fn with_jitter_rel(mut self, jitter_rel: f64) -> Result<Self> {
        self.jitter_rel = jitter_rel;
        self.validate()?;
        Ok(self)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.log_weights.len()
    }

    #[inline]
    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    #[inline]
    pub fn weight(&self, j: usize) -> f64 {
        self.log_weights[j].exp()
    }

    /// Absolute jitter added to kernel-matrix diagonals.
    #[inline]
    pub fn jitter(&self) -> f64 {
        self.jitter_rel * self.amplitude()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.log_amplitude.is_finite() || self.log_weights.iter().any(|w| w.is_nan()) {
            return Err(contract("kernel hyperparameters must be finite"));
        }
        if !(self.jitter_rel > 0.0 && self.jitter_rel <= MAX_JITTER_REL) {
            return Err(contract("jitter must lie in (0, 1e-4 · amplitude]"));
        }
        Ok(())
    }
}

/// Anchor input-output pairs `{(s_n, t_n)}` conditioning the GP mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalData {
    /// `m × c`, one anchor input per row.
    pub inputs: Matrix,
    /// `m × d'`, one anchor output per row.
    pub outputs: Matrix,
}

impl VariationalData {
    pub fn new(inputs: Matrix, outputs: Matrix) -> Result<Self> {
        check_len("VariationalData rows", inputs.rows(), outputs.rows())?;
        if !inputs.is_finite() || !outputs.is_finite() {
            return Err(contract("variational data must be finite"));
        }
        Ok(Self { inputs, outputs })
    }

    /// No anchors: the mapping is the unconditioned GP prior.
    pub fn empty(input_dim: usize, output_dim: usize) -> Self {
        Self {
            inputs: Matrix::zeros(0, input_dim),
            outputs: Matrix::zeros(0, output_dim),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.outputs.cols()
    }
}

/// Conditional moments of the GP mapping at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct GpConditional {
    /// One mean per output dimension.
    pub mean: Vec<f64>,
    /// Shared by every output dimension.
    pub variance: f64,
}

#[inline]
fn eval_unchecked(a: &[f64], b: &[f64], params: &KernelParams) -> f64 {
    match params.kind {
        KernelKind::Ard => {
            let mut s = 0.0;
            for j in 0..a.len() {
                let d = a[j] - b[j];
                s += params.log_weights[j].exp() * d * d;
            }
            (params.log_amplitude - 0.5 * s).exp()
        }
        KernelKind::Linear => dot(a, b),
    }
}

pub fn eval_kernel(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    check_len("eval_kernel lhs", params.dim(), a.len())?;
    check_len("eval_kernel rhs", params.dim(), b.len())?;
    Ok(eval_unchecked(a, b, params))
}

/// `K_ij = k(s_i, s_j) + jitter · δ_ij`.
pub fn kernel_matrix(inputs: &Matrix, params: &KernelParams) -> Result<Matrix> {
    check_len("kernel_matrix input dim", params.dim(), inputs.cols())?;
    if inputs.rows() == 0 {
        return Err(contract("kernel_matrix needs at least one input"));
    }
    if !inputs.is_finite() {
        return Err(contract("kernel_matrix inputs must be finite"));
    }
    Ok(kernel_matrix_unchecked(inputs, params))
}

fn kernel_matrix_unchecked(inputs: &Matrix, params: &KernelParams) -> Matrix {
    let m = inputs.rows();
    let jitter = params.jitter();
    let mut k = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            let v = eval_unchecked(inputs.row(i), inputs.row(j), params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = eval_unchecked(inputs.row(i), inputs.row(i), params) + jitter;
    }
    k
}

/// Intermediates kept by the forward pass for the pullback.
#[derive(Debug, Clone)]
pub(crate) struct ConditionalTape {
    chol: Matrix,
    /// `L⁻¹ k_Sξ`.
    a: Vec<f64>,
    /// `L⁻¹ T`.
    b: Matrix,
    /// Whether the noise-free variance was clamped at zero.
    clamped: bool,
}

pub fn gp_conditional(
    query: &[f64],
    data: &VariationalData,
    params: &KernelParams,
) -> Result<GpConditional> {
    gp_conditional_taped(query, data, params).map(|(c, _)| c)
}

pub(crate) fn gp_conditional_taped(
    query: &[f64],
    data: &VariationalData,
    params: &KernelParams,
) -> Result<(GpConditional, ConditionalTape)> {
    check_len("gp_conditional query", params.dim(), query.len())?;
    check_len("gp_conditional anchor inputs", params.dim(), data.input_dim())?;
    let m = data.len();
    let dout = data.output_dim();
    let jitter = params.jitter();
    let prior_var = eval_unchecked(query, query, params);

    if m == 0 {
        let tape = ConditionalTape {
            chol: Matrix::zeros(0, 0),
            a: Vec::new(),
            b: Matrix::zeros(0, dout),
            clamped: false,
        };
        let cond = GpConditional {
            mean: vec![0.0; dout],
            variance: prior_var.max(0.0) + jitter,
        };
        return Ok((cond, tape));
    }

    let k = kernel_matrix(&data.inputs, params)?;
    let chol = cholesky(&k)?;
    let cross: Vec<f64> = (0..m)
        .map(|n| eval_unchecked(query, data.inputs.row(n), params))
        .collect();
    let a = solve_lower(&chol, &cross);
    let b = solve_lower_matrix(&chol, &data.outputs);

    let mut mean = vec![0.0; dout];
    for n in 0..m {
        let an = a[n];
        for (mi, &bi) in mean.iter_mut().zip(b.row(n)) {
            *mi += an * bi;
        }
    }
    let raw = prior_var - dot(&a, &a);
    let clamped = raw < 0.0;
    let variance = raw.max(0.0) + jitter;
    Ok((
        GpConditional { mean, variance },
        ConditionalTape {
            chol,
            a,
            b,
            clamped,
        },
    ))
}

/// Adjoints of the conditional moments with respect to every input.
#[derive(Debug, Clone)]
pub(crate) struct ConditionalGrads {
    pub query: Vec<f64>,
    pub inputs: Matrix,
    pub outputs: Matrix,
    pub log_amplitude: f64,
    pub log_weights: Vec<f64>,
}

/// Accumulates `k_bar · ∂k(a, b)` into the adjoints of `a`, `b`, and the
/// hyperparameters.
fn kernel_partials(
    a: &[f64],
    b: &[f64],
    params: &KernelParams,
    k_bar: f64,
    a_bar: &mut [f64],
    b_bar: &mut [f64],
    grads_la: &mut f64,
    grads_lw: &mut [f64],
) {
    if k_bar == 0.0 {
        return;
    }
    match params.kind {
        KernelKind::Ard => {
            let k = eval_unchecked(a, b, params);
            let g = k_bar * k;
            *grads_la += g;
            for j in 0..a.len() {
                let d = a[j] - b[j];
                let w = params.log_weights[j].exp();
                grads_lw[j] -= 0.5 * g * w * d * d;
                a_bar[j] -= g * w * d;
                b_bar[j] += g * w * d;
            }
        }
        KernelKind::Linear => {
            for j in 0..a.len() {
                a_bar[j] += k_bar * b[j];
                b_bar[j] += k_bar * a[j];
            }
        }
    }
}

pub(crate) fn gp_conditional_pullback(
    query: &[f64],
    data: &VariationalData,
    params: &KernelParams,
    tape: &ConditionalTape,
    mean_bar: &[f64],
    var_bar: f64,
) -> ConditionalGrads {
    let c = params.dim();
    let m = data.len();
    let dout = data.output_dim();
    let mut g = ConditionalGrads {
        query: vec![0.0; c],
        inputs: Matrix::zeros(m, c),
        outputs: Matrix::zeros(m, dout),
        log_amplitude: 0.0,
        log_weights: vec![0.0; c],
    };

    // Nugget: jitter = rel · exp(log σ²).
    g.log_amplitude += var_bar * params.jitter();

    let prior_bar = if tape.clamped { 0.0 } else { var_bar };
    {
        let mut q_bar = vec![0.0; c];
        let mut q_bar2 = vec![0.0; c];
        kernel_partials(
            query,
            query,
            params,
            prior_bar,
            &mut q_bar,
            &mut q_bar2,
            &mut g.log_amplitude,
            &mut g.log_weights,
        );
        for j in 0..c {
            g.query[j] += q_bar[j] + q_bar2[j];
        }
    }
    if m == 0 {
        return g;
    }

    // variance = prior - aᵀa ; mean = Bᵀ a
    let mut a_bar: Vec<f64> = tape.a.iter().map(|&ai| -2.0 * prior_bar * ai).collect();
    let mut b_bar = Matrix::zeros(m, dout);
    for n in 0..m {
        a_bar[n] += dot(tape.b.row(n), mean_bar);
        for (bb, &mb) in b_bar.row_mut(n).iter_mut().zip(mean_bar) {
            *bb = tape.a[n] * mb;
        }
    }

    // a = L⁻¹ k  ⇒  k̄ = L⁻ᵀ ā,  L̄ -= tril(k̄ aᵀ)
    // B = L⁻¹ T  ⇒  T̄ = L⁻ᵀ B̄,  L̄ -= tril(T̄ Bᵀ)
    let cross_bar = solve_lower_transpose(&tape.chol, &a_bar);
    let t_bar = solve_lower_transpose_matrix(&tape.chol, &b_bar);
    let mut l_bar = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            l_bar[(i, j)] = -cross_bar[i] * tape.a[j] - dot(t_bar.row(i), tape.b.row(j));
        }
    }
    g.outputs = t_bar;

    let k_bar = cholesky_pullback(&tape.chol, &l_bar);

    // Diagonal jitter on K.
    let trace: f64 = (0..m).map(|i| k_bar[(i, i)]).sum();
    g.log_amplitude += trace * params.jitter();

    let mut si_bar = vec![0.0; c];
    let mut sj_bar = vec![0.0; c];
    for i in 0..m {
        for j in 0..m {
            si_bar.iter_mut().for_each(|v| *v = 0.0);
            sj_bar.iter_mut().for_each(|v| *v = 0.0);
            kernel_partials(
                data.inputs.row(i),
                data.inputs.row(j),
                params,
                k_bar[(i, j)],
                &mut si_bar,
                &mut sj_bar,
                &mut g.log_amplitude,
                &mut g.log_weights,
            );
            for d in 0..c {
                g.inputs[(i, d)] += si_bar[d];
                g.inputs[(j, d)] += sj_bar[d];
            }
        }
    }

    // Cross covariances k(ξ, s_n).
    for n in 0..m {
        si_bar.iter_mut().for_each(|v| *v = 0.0);
        kernel_partials(
            query,
            data.inputs.row(n),
            params,
            cross_bar[n],
            &mut g.query,
            &mut si_bar,
            &mut g.log_amplitude,
            &mut g.log_weights,
        );
        for d in 0..c {
            g.inputs[(n, d)] += si_bar[d];
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn data(inputs: &[&[f64]], outputs: &[&[f64]]) -> VariationalData {
        let i = Matrix::from_rows(&inputs.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let o = Matrix::from_rows(&outputs.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        VariationalData::new(i, o).unwrap()
    }

    #[test]
    fn ard_at_identical_points_is_amplitude() {
        let p = KernelParams::ard(0.7, vec![0.3, -1.0]);
        let v = eval_kernel(&[0.4, -2.0], &[0.4, -2.0], &p).unwrap();
        assert!((v - 0.7f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn ard_with_zero_weights_is_amplitude() {
        let p = KernelParams::ard(1.2, vec![f64::NEG_INFINITY; 3]);
        let v = eval_kernel(&[1.0, 2.0, 3.0], &[-5.0, 0.0, 9.0], &p).unwrap();
        assert!((v - 1.2f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn ard_direct_substitution() {
        let p = KernelParams::ard(0.0, vec![2f64.ln()]);
        let v = eval_kernel(&[0.0], &[1.0], &p).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        assert!((v - 0.367_879).abs() < 1e-6);
    }

    #[test]
    fn linear_kernel_is_dot_product() {
        let p = KernelParams::linear(2);
        assert_eq!(eval_kernel(&[1.0, 2.0], &[3.0, -1.0], &p).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = KernelParams::unit_ard(2);
        assert!(matches!(
            eval_kernel(&[1.0], &[1.0, 2.0], &p),
            Err(crate::Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_row_matrix() {
        let p = KernelParams::ard(0.5, vec![0.0]);
        let k = kernel_matrix(&Matrix::from_rows(&[vec![3.0]]).unwrap(), &p).unwrap();
        assert_eq!(k.rows(), 1);
        assert!((k[(0, 0)] - (0.5f64.exp() + p.jitter())).abs() < 1e-15);
    }

    #[test]
    fn duplicate_rows_are_pd_after_jitter() {
        let p = KernelParams::unit_ard(2);
        let s = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let k = kernel_matrix(&s, &p).unwrap();
        assert_eq!(k[(0, 1)], 1.0);
        assert!(cholesky(&k).is_ok());
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let p = KernelParams::unit_ard(1);
        let s = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(kernel_matrix(&s, &p).is_err());
    }

    #[test]
    fn jitter_bound_enforced() {
        assert!(KernelParams::unit_ard(1).with_jitter_rel(1e-3).is_err());
        assert!(KernelParams::unit_ard(1).with_jitter_rel(0.0).is_err());
        assert!(KernelParams::unit_ard(1).with_jitter_rel(1e-4).is_ok());
    }

    #[test]
    fn unconditioned_prior() {
        let p = KernelParams::ard(0.3, vec![0.0, 0.0]);
        let c = gp_conditional(&[1.0, -1.0], &VariationalData::empty(2, 3), &p).unwrap();
        assert_eq!(c.mean, vec![0.0; 3]);
        assert!((c.variance - 0.3f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn anchor_query_interpolates() {
        let p = KernelParams::unit_ard(1);
        let d = data(&[&[-1.0], &[0.2], &[1.5]], &[&[3.0, -1.0], &[0.5, 2.0], &[-2.0, 0.0]]);
        for n in 0..3 {
            let c = gp_conditional(d.inputs.row(n), &d, &p).unwrap();
            for (mi, ti) in c.mean.iter().zip(d.outputs.row(n)) {
                assert!((mi - ti).abs() < 1e-6);
            }
            assert!(c.variance <= 10.0 * p.jitter());
        }
    }

    #[test]
    fn two_anchor_explicit_inverse() {
        // Independent route: invert the 2×2 matrix by the adjugate formula.
        let p = KernelParams::ard(0.2, vec![0.5f64.ln()]);
        let (s1, s2, t1, t2, q) = (-0.4, 0.9, 1.3, -0.7, 0.25);
        let d = data(&[&[s1], &[s2]], &[&[t1], &[t2]]);
        let sig = 0.2f64.exp();
        let k = |a: f64, b: f64| sig * (-0.25 * (a - b) * (a - b)).exp();
        let j = 1e-8 * sig;
        let (a11, a12, a22) = (k(s1, s1) + j, k(s1, s2), k(s2, s2) + j);
        let det = a11 * a22 - a12 * a12;
        let inv = [[a22 / det, -a12 / det], [-a12 / det, a11 / det]];
        let kq = [k(q, s1), k(q, s2)];
        let w = [
            kq[0] * inv[0][0] + kq[1] * inv[1][0],
            kq[0] * inv[0][1] + kq[1] * inv[1][1],
        ];
        let mean = w[0] * t1 + w[1] * t2;
        let var = sig - (w[0] * kq[0] + w[1] * kq[1]) + j;
        let c = gp_conditional(&[q], &d, &p).unwrap();
        assert!((c.mean[0] - mean).abs() < 1e-10);
        assert!((c.variance - var).abs() < 1e-10);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let p = KernelParams::ard(0.3, vec![-0.2, 0.4]);
        let d = data(
            &[&[0.1, -0.5], &[1.0, 0.3], &[-0.8, 0.9], &[0.4, 0.4]],
            &[&[1.0, 0.0, -1.0], &[0.5, 2.0, 0.3], &[-0.3, 0.1, 0.7], &[0.2, -0.6, 1.1]],
        );
        let q = [0.3, 0.1];
        let mean_bar = [0.7, -1.1, 0.4];
        let var_bar = 1.9;
        let loss = |q: &[f64], d: &VariationalData, p: &KernelParams| {
            let c = gp_conditional(q, d, p).unwrap();
            dot(&c.mean, &mean_bar) + var_bar * c.variance
        };
        let (_, tape) = gp_conditional_taped(&q, &d, &p).unwrap();
        let g = gp_conditional_pullback(&q, &d, &p, &tape, &mean_bar, var_bar);
        let h = 1e-6;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-6 * (1.0 + an.abs());

        for j in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[j] += h;
            qm[j] -= h;
            let fd = (loss(&qp, &d, &p) - loss(&qm, &d, &p)) / (2.0 * h);
            assert!(close(fd, g.query[j]), "query {j}: {fd} vs {}", g.query[j]);
        }
        for n in 0..4 {
            for j in 0..2 {
                let mut dp = d.clone();
                let mut dm = d.clone();
                dp.inputs[(n, j)] += h;
                dm.inputs[(n, j)] -= h;
                let fd = (loss(&q, &dp, &p) - loss(&q, &dm, &p)) / (2.0 * h);
                assert!(close(fd, g.inputs[(n, j)]), "input {n},{j}: {fd} vs {}", g.inputs[(n, j)]);
            }
            for j in 0..3 {
                let mut dp = d.clone();
                let mut dm = d.clone();
                dp.outputs[(n, j)] += h;
                dm.outputs[(n, j)] -= h;
                let fd = (loss(&q, &dp, &p) - loss(&q, &dm, &p)) / (2.0 * h);
                assert!(close(fd, g.outputs[(n, j)]));
            }
        }
        let mut pp = p.clone();
        let mut pm = p.clone();
        pp.log_amplitude += h;
        pm.log_amplitude -= h;
        let fd = (loss(&q, &d, &pp) - loss(&q, &d, &pm)) / (2.0 * h);
        assert!(close(fd, g.log_amplitude), "{fd} vs {}", g.log_amplitude);
        for j in 0..2 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.log_weights[j] += h;
            pm.log_weights[j] -= h;
            let fd = (loss(&q, &d, &pp) - loss(&q, &d, &pm)) / (2.0 * h);
            assert!(close(fd, g.log_weights[j]), "lw {j}: {fd} vs {}", g.log_weights[j]);
        }
    }

    #[test]
    fn linear_kernel_pullback_matches_finite_differences() {
        let p = KernelParams::linear(2);
        let d = data(&[&[1.0, 0.2], &[-0.3, 0.8]], &[&[1.0], &[-2.0]]);
        let q = [0.4, -0.7];
        let loss = |q: &[f64], d: &VariationalData| {
            let c = gp_conditional(q, d, &p).unwrap();
            1.3 * c.mean[0] - 0.8 * c.variance
        };
        let (_, tape) = gp_conditional_taped(&q, &d, &p).unwrap();
        let g = gp_conditional_pullback(&q, &d, &p, &tape, &[1.3], -0.8);
        let h = 1e-6;
        for j in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[j] += h;
            qm[j] -= h;
            let fd = (loss(&qp, &d) - loss(&qm, &d)) / (2.0 * h);
            assert!((fd - g.query[j]).abs() < 1e-5, "{fd} vs {}", g.query[j]);
        }
    }
}
