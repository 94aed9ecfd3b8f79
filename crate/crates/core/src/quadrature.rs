//! Numerical integration: Gauss–Hermite rules (tensor grids for small
//! dimensions) and adaptive Simpson for bounded 1D integrals.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;


pub const DEFAULT_NODES: usize = 64;

/// Gauss–Hermite rule for `∫ g(y) e^{-y²} dy`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    /// Nodes and weights for `E_{N(0,1)}[g(z)]`.
    pub fn standard_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
        let gh = Self::new(n);
        let s = core::f64::consts::SQRT_2;
        let norm = core::f64::consts::PI.sqrt();
        (
            gh.nodes.iter().map(|y| y * s).collect(),
            gh.weights.iter().map(|w| w / norm).collect(),
        )
    }
}

/// Calls `visit(point, log_weight)` for every node of the tensor-product
/// rule for `E_{N(0, I_dim)}`.
pub fn for_each_normal_node(dim: usize, n: usize, mut visit: impl FnMut(&[f64], f64)) {
    let (nodes, weights) = GaussHermite::standard_normal(n);
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut idx = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    let total = n.pow(dim as u32);
    for _ in 0..total {
        let mut lw = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            point[k] = nodes[i];
            lw += log_w[i];
        }
        visit(&point, lw);
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < n {
                break;
            }
            *slot = 0;
        }
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_rule_integrates_moments() {
        let (x, w) = GaussHermite::standard_normal(DEFAULT_NODES);
        let m = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn tensor_grid_covers_all_nodes() {
        let mut count = 0;
        let mut total = 0.0;
        for_each_normal_node(2, 8, |_, lw| {
            count += 1;
            total += lw.exp();
        });
        assert_eq!(count, 64);
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simpson_integrates_gaussian() {
        let f = |x: f64| (-0.5 * x * x).exp();
        let v = adaptive_simpson(&f, -12.0, 12.0, 1e-12);
        assert!((v - (2.0 * core::f64::consts::PI).sqrt()).abs() < 1e-10);
    }
}
