mod common;

use std::time::Instant;

use approx::assert_abs_diff_eq;
use common::{log_normal_pdf, mean_and_se, normal_pdf, simpson};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vgp_core::objective::{diag_gaussian_kl, standard_normal_kl};

struct Config {
    m1: Vec<f64>,
    v1: Vec<f64>,
    m2: Vec<f64>,
    v2: Vec<f64>,
}

fn configs() -> Vec<Config> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..20)
        .map(|i| {
            let n = 1 + i % 5;
            let mut draw = |lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
            Config {
                m1: draw(-3.0, 3.0),
                v1: draw(0.05, 4.0),
                m2: draw(-3.0, 3.0),
                v2: draw(0.05, 4.0),
            }
        })
        .collect()
}

fn quadrature_kl(c: &Config) -> f64 {
    (0..c.m1.len())
        .map(|j| {
            let (m1, v1, m2, v2) = (c.m1[j], c.v1[j], c.m2[j], c.v2[j]);
            let sd = v1.sqrt();
            simpson(
                |z| normal_pdf(z, m1, v1) * (log_normal_pdf(z, m1, v1) - log_normal_pdf(z, m2, v2)),
                m1 - 14.0 * sd,
                m1 + 14.0 * sd,
                20_000,
            )
        })
        .sum()
}

#[test]
fn matches_quadrature_on_random_configs() {
    let start = Instant::now();
    for c in configs() {
        let kl = diag_gaussian_kl(&c.m1, &c.v1, &c.m2, &c.v2).unwrap();
        assert_abs_diff_eq!(kl, quadrature_kl(&c), epsilon = 1e-6);
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn matches_monte_carlo_within_three_se() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for c in configs() {
        let kl = diag_gaussian_kl(&c.m1, &c.v1, &c.m2, &c.v2).unwrap();
        let draws: Vec<f64> = (0..20_000)
            .map(|_| {
                (0..c.m1.len())
                    .map(|j| {
                        let e: f64 = rng.sample(StandardNormal);
                        let z = c.m1[j] + c.v1[j].sqrt() * e;
                        log_normal_pdf(z, c.m1[j], c.v1[j]) - log_normal_pdf(z, c.m2[j], c.v2[j])
                    })
                    .sum()
            })
            .collect();
        let (m, se) = mean_and_se(&draws);
        assert!((kl - m).abs() < 3.0 * se, "kl {kl} mc {m} se {se}");
    }
}

#[test]
fn standard_normal_kl_uses_log_variance() {
    let lambda = [0.3, 1.2, -1.0, 0.4];
    let (m, lv) = (&[0.3, 1.2], &[-1.0, 0.4]);
    let v: Vec<f64> = lv.iter().map(|l: &f64| l.exp()).collect();
    let reference = diag_gaussian_kl(m, &v, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
    assert_abs_diff_eq!(standard_normal_kl(&lambda), reference, epsilon = 1e-12);
}

#[test]
fn rejects_bad_variances() {
    assert!(diag_gaussian_kl(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    assert!(diag_gaussian_kl(&[0.0], &[1.0], &[0.0], &[-1.0]).is_err());
    assert!(diag_gaussian_kl(&[0.0, 1.0], &[1.0], &[0.0], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(
        m1 in -5.0..5.0f64, v1 in 1e-3..10.0f64, m2 in -5.0..5.0f64, v2 in 1e-3..10.0f64,
    ) {
        let kl = diag_gaussian_kl(&[m1], &[v1], &[m2], &[v2]).unwrap();
        prop_assert!(kl >= -1e-12);
        let same = diag_gaussian_kl(&[m1], &[v1], &[m1], &[v1]).unwrap();
        prop_assert!(same.abs() < 1e-12);
    }
}
