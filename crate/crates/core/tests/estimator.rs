mod common;

use std::time::Instant;

use approx::assert_abs_diff_eq;
use common::{log_normal_pdf, mean_and_se};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vgp_core::autodiff::{estimate_bound, objective_at_noise, Architecture, InitConfig, ParameterVector};
use vgp_core::targets::{make_conjugate_gaussian, make_correlated_gaussian};
use vgp_core::vgp::NoiseDraw;
use vgp_core::{BoundMode, FamilyKind, MeanFieldFamily};

fn vgp_arch(mode: BoundMode) -> Architecture {
    let family = MeanFieldFamily::new(FamilyKind::Gaussian, 2).unwrap();
    Architecture::vgp(family, 2, 2, 8, mode)
}

#[test]
fn analytic_and_general_bounds_agree_with_lower_variance() {
    let start = Instant::now();
    let model = make_conjugate_gaussian(2, 1.0).unwrap();
    let x = [0.8, -0.5];
    let analytic = vgp_arch(BoundMode::Analytic);
    let general = vgp_arch(BoundMode::General);
    assert_eq!(analytic.layout(), general.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = analytic.init_params(&InitConfig::default(), &mut rng);

    let n = 10_000;
    let (mut a, mut g, mut diff) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let noise = analytic.draw_noise(&mut rng);
        let ta = objective_at_noise(&params, &x, &model, &analytic, &noise).unwrap().total();
        let tg = objective_at_noise(&params, &x, &model, &general, &noise).unwrap().total();
        a.push(ta);
        g.push(tg);
        diff.push(ta - tg);
    }
    let (ma, sa) = mean_and_se(&a);
    let (mg, sg) = mean_and_se(&g);
    let (md, sd) = mean_and_se(&diff);
    assert!(md.abs() < 3.0 * sd, "paired difference {md} (se {sd})");
    assert!((ma - mg).abs() < 3.0 * (sa * sa + sg * sg).sqrt());
    assert!(sa < sg, "analytic se {sa} vs general se {sg}");
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn mean_field_terms_match_hand_computation() {
    let model = make_conjugate_gaussian(1, 0.5).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Gaussian, 1).unwrap();
    let (mu, lv, eps, x) = (0.3, -0.7, 1.1, 0.9);
    let z = mu + (0.5f64 * lv).exp() * eps;
    let noise = NoiseDraw { xi: vec![], eta: vec![], eps: vec![eps] };

    let arch = Architecture::mean_field(family, 1, BoundMode::Analytic);
    let params = ParameterVector::pack(&[("q.lambda".into(), vec![mu, lv])]).unwrap();
    assert_eq!(params.layout, arch.layout());
    let t = objective_at_noise(&params, &[x], &model, &arch, &noise).unwrap();
    let kl = 0.5 * (mu * mu + lv.exp() - lv - 1.0);
    assert_abs_diff_eq!(t.reconstruction, log_normal_pdf(x, z, 0.5), epsilon = 1e-12);
    assert_abs_diff_eq!(t.prior_kl, kl, epsilon = 1e-12);

    let arch = Architecture::mean_field(family, 1, BoundMode::General);
    let t = objective_at_noise(&params, &[x], &model, &arch, &noise).unwrap();
    let expected = log_normal_pdf(x, z, 0.5) + log_normal_pdf(z, 0.0, 1.0) - log_normal_pdf(z, mu, lv.exp());
    assert_abs_diff_eq!(t.total(), expected, epsilon = 1e-12);
}

#[test]
fn bound_is_tight_at_the_exact_posterior() {
    // q equal to the posterior makes the mean-field bound tight.
    let model = make_conjugate_gaussian(1, 0.5).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Gaussian, 1).unwrap();
    let arch = Architecture::mean_field(family, 1, BoundMode::General);
    let x = 1.2;
    let post_var: f64 = 0.5 / 1.5;
    let params = ParameterVector::pack(&[("q.lambda".into(), vec![x / 1.5, post_var.ln()])]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let est = estimate_bound(&params, &[x], &model, &arch, 200, &mut rng).unwrap();
    let evidence = log_normal_pdf(x, 0.0, 1.5);
    assert_abs_diff_eq!(est.total, evidence, epsilon = 1e-10);
    assert!(est.sample_variance < 1e-20);
}

#[test]
fn analytic_mode_needs_standard_normal_prior() {
    let model = make_correlated_gaussian(0.5).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Gaussian, 2).unwrap();
    let arch = Architecture::vgp(family, 0, 2, 4, BoundMode::Analytic);
    assert!(arch.validate(&model).is_err());
    assert_eq!(BoundMode::for_target(&model, &family), BoundMode::General);
}
