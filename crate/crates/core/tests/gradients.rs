use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vgp_core::autodiff::{
    objective_at_noise, objective_with_gradient, score_check, Architecture, Fault, InitConfig, ParameterVector,
    ScoreBaseline,
};
use vgp_core::nets::Activation;
use vgp_core::targets::{make_bernoulli_posterior, make_conjugate_gaussian, make_tiny_dlgm, TargetModel};
use vgp_core::vgp::NoiseDraw;
use vgp_core::{BoundMode, FamilyKind, MeanFieldFamily};

const H: f64 = 1e-5;

fn central_differences(f: impl Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + H;
            let up = f(&q);
            q[i] = p[i] - H;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn perturbed(arch: &Architecture, rng: &mut ChaCha8Rng) -> ParameterVector {
    let mut p = arch.init_params(&InitConfig::default(), rng);
    for v in &mut p.flat {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

/// Worst relative error per segment over `points` random parameter vectors.
fn worst_errors(arch: &Architecture, model: &dyn TargetModel, x: &[f64], points: u64) -> Vec<(String, f64)> {
    let mut worst: Vec<(String, f64)> = arch.layout().iter().map(|s| (s.name.clone(), 0.0)).collect();
    for seed in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = perturbed(arch, &mut rng);
        let noise = arch.draw_noise(&mut rng);
        let analytic = objective_with_gradient(&params, x, model, arch, &noise).unwrap();
        let numeric = central_differences(
            |flat| {
                let p = ParameterVector::new(params.layout.clone(), flat.to_vec()).unwrap();
                objective_at_noise(&p, x, model, arch, &noise).unwrap().total()
            },
            &params.flat,
        );
        for (w, seg) in worst.iter_mut().zip(&params.layout) {
            for i in seg.range() {
                w.1 = w.1.max(rel(analytic.grad[i], numeric[i]));
            }
        }
    }
    worst
}

fn conjugate_vgp(mode: BoundMode) -> (Box<dyn TargetModel>, Architecture) {
    let model = make_conjugate_gaussian(2, 0.7).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Gaussian, 2).unwrap();
    let arch = Architecture::vgp(family, 2, 2, 5, mode);
    (Box::new(model), arch)
}

#[test]
fn pathwise_gradient_matches_finite_differences() {
    let start = Instant::now();
    for mode in [BoundMode::Analytic, BoundMode::General] {
        let (model, arch) = conjugate_vgp(mode);
        for (name, err) in worst_errors(&arch, model.as_ref(), &[0.4, -1.1], 5) {
            assert!(err < 1e-4, "{mode:?} {name}: {err:e}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn amortized_q_and_aux_network_gradients() {
    let model = make_tiny_dlgm(6, 2, 3).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Gaussian, 2).unwrap();
    let arch = Architecture::vgp(family, 6, 2, 4, BoundMode::Analytic)
        .amortize_q(&[5], Activation::Tanh)
        .unwrap()
        .with_aux_network(&[4], Activation::Relu)
        .unwrap();
    let x = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    for (name, err) in worst_errors(&arch, &model, &x, 5) {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
}

#[test]
fn mean_field_gradients() {
    let model = make_conjugate_gaussian(3, 0.5).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Gaussian, 3).unwrap();
    for mode in [BoundMode::Analytic, BoundMode::General] {
        let arch = Architecture::mean_field(family, 3, mode);
        for (name, err) in worst_errors(&arch, &model, &[0.2, 1.5, -0.3], 3) {
            assert!(err < 1e-4, "{name}: {err:e}");
        }
    }
}

#[test]
fn every_segment_receives_gradient() {
    let (model, arch) = conjugate_vgp(BoundMode::Analytic);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = perturbed(&arch, &mut rng);
    let noise = arch.draw_noise(&mut rng);
    let r = objective_with_gradient(&params, &[0.4, -1.1], model.as_ref(), &arch, &noise).unwrap();
    assert_eq!(r.segment_norms.len(), params.layout.len());
    for (name, n) in &r.segment_norms {
        assert!(*n > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn injected_fault_is_detected() {
    let (model, mut arch) = conjugate_vgp(BoundMode::Analytic);
    arch.fault = Some(Fault::KernelPullback);
    let worst = worst_errors(&arch, model.as_ref(), &[0.4, -1.1], 2);
    let amp = worst.iter().find(|w| w.0 == "kernel.log_amplitude").unwrap();
    assert!(amp.1 > 1e-2, "{amp:?}");
}

#[test]
fn pathwise_refuses_bernoulli() {
    let model = make_bernoulli_posterior(2, &[0.0, 0.0, 0.0, 3.0]).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Bernoulli, 2).unwrap();
    let arch = Architecture::vgp(family, 0, 2, 5, BoundMode::General);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = arch.init_params(&InitConfig::default(), &mut rng);
    let noise = arch.draw_noise(&mut rng);
    assert!(objective_with_gradient(&params, &[], &model, &arch, &noise).is_err());
}

/// Exact `E_{z ~ q(z|f)}[total]` by summing the four outcomes by hand.
fn enumerate_by_hand(
    params: &ParameterVector,
    model: &dyn TargetModel,
    arch: &Architecture,
    xi: &[f64],
    eta: &[f64],
    lambda: &[f64],
) -> f64 {
    let p: Vec<f64> = lambda.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
    let mut total = 0.0;
    for idx in 0..4usize {
        let bits = [(idx & 1) as f64, ((idx >> 1) & 1) as f64];
        // eps below p gives 1, above gives 0.
        let eps: Vec<f64> = (0..2).map(|i| if bits[i] == 1.0 { p[i] / 2.0 } else { (1.0 + p[i]) / 2.0 }).collect();
        let prob: f64 = (0..2).map(|i| if bits[i] == 1.0 { p[i] } else { 1.0 - p[i] }).product();
        let noise = NoiseDraw { xi: xi.to_vec(), eta: eta.to_vec(), eps };
        total += prob * objective_at_noise(params, &[], model, arch, &noise).unwrap().total();
    }
    total
}

#[test]
fn score_function_matches_enumeration_on_bernoulli() {
    let model = make_bernoulli_posterior(2, &[0.0, 0.0, 0.0, 3.0]).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Bernoulli, 2).unwrap();
    let arch = Architecture::mean_field(family, 0, BoundMode::General);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = perturbed(&arch, &mut rng);
    let lambda = params.segment("q.lambda").unwrap().to_vec();
    let oracle = central_differences(
        |flat| {
            let p = ParameterVector::new(params.layout.clone(), flat.to_vec()).unwrap();
            enumerate_by_hand(&p, &model, &arch, &[], &[], p.segment("q.lambda").unwrap())
        },
        &params.flat,
    );
    assert_eq!(lambda.len(), 2);
    let mut baseline = ScoreBaseline::default();
    let check = score_check(&params, &[], &model, &arch, &[], &[], 100_000, Some(&mut baseline), &mut rng).unwrap();
    for i in 0..oracle.len() {
        assert!((check.oracle[i] - oracle[i]).abs() < 1e-6);
        let z = (check.mean[i] - oracle[i]).abs() / check.std_error[i];
        assert!(z < 3.0, "coordinate {i}: z = {z}");
    }
}

#[test]
fn score_function_matches_enumeration_through_vgp() {
    let model = make_bernoulli_posterior(2, &[0.0, 0.0, 0.0, 3.0]).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Bernoulli, 2).unwrap();
    let arch = Architecture::vgp(family, 0, 2, 4, BoundMode::General);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = perturbed(&arch, &mut rng);
    let noise = arch.draw_noise(&mut rng);
    let mut baseline = ScoreBaseline::default();
    let check = score_check(
        &params,
        &[],
        &model,
        &arch,
        &noise.xi,
        &noise.eta,
        100_000,
        Some(&mut baseline),
        &mut rng,
    )
    .unwrap();
    assert!(check.max_z() < 3.0, "max z {}", check.max_z());
}

#[test]
fn delta_family_gradients() {
    let model = vgp_core::targets::make_correlated_gaussian(0.6).unwrap();
    let family = MeanFieldFamily::new(FamilyKind::Delta, 2).unwrap();
    let arch = Architecture::vgp(family, 0, 2, 5, BoundMode::General);
    assert_eq!(arch.aux_dim(), 2);
    for (name, err) in worst_errors(&arch, &model, &[], 5) {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
    let arch = arch.with_aux_network(&[4], Activation::Tanh).unwrap();
    for (name, err) in worst_errors(&arch, &model, &[], 5) {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
}
