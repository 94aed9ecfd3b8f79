//! The five subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vgp_core::autodiff::{
    compare_gradients, finite_diff_gradient, objective_at_noise, objective_with_gradient, score_check,
    Architecture, Fault, InitConfig, ParameterVector, ScoreBaseline,
};
use vgp_core::kernel::{KernelKind, KernelParams};
use vgp_core::linalg::Matrix;
use vgp_core::nets;
use vgp_core::objective::BoundMode;
use vgp_core::rng::StreamSplitter;
use vgp_core::targets::{make_tiny_dlgm, oracle_moments, TargetModel};
use vgp_core::train::{self, BoundEstimate, Clock, NoClock, OptimizerConfig, TrainConfig};
use vgp_core::universal::{convergence_experiment, is_monotone, AnchorKernel};
use vgp_core::{FamilyKind, MeanFieldFamily};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{self, ConfigError, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{self, OracleReport, UniversalRow};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

/// A validated config together with its text, for locating later errors.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    source: String,
    origin: String,
}

impl Loaded {
    pub fn load(opts: &Options) -> CliResult<Self> {
        let (source, origin) = match &opts.config {
            Some(p) => (
                fs::read_to_string(p).map_err(|source| CliError::Read { path: p.clone(), source })?,
                p.display().to_string(),
            ),
            None => (String::new(), "<defaults>".to_string()),
        };
        let mut config = RunConfig::parse(&source, &origin)?;
        if let Some(seed) = opts.seed {
            config.seed = seed;
        }
        if let Some(out) = &opts.out {
            config.output.dir = out.clone();
        }
        Ok(Self { config, source, origin })
    }

    pub fn from_config(config: RunConfig) -> Self {
        Self {
            config,
            source: String::new(),
            origin: "<config>".into(),
        }
    }

    fn error(&self, key: &str, message: impl Into<String>) -> CliError {
        CliError::Config(ConfigError {
            origin: self.origin.clone(),
            line: config::locate(&self.source, key),
            key: key.to_string(),
            message: message.into(),
        })
    }

    /// Applies `--param key=value` target overrides and revalidates.
    fn override_target(&mut self, name: Option<&str>, params: &[String]) -> CliResult<()> {
        for p in params {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--param expects KEY=VALUE, got `{p}`")))?;
            self.config.target.set(k.trim(), v).map_err(CliError::Usage)?;
        }
        if name.is_some_and(|n| n != self.config.target.name) {
            // Observations in the file belong to the old target.
            self.config.data = Default::default();
        }
        if let Some(n) = name {
            self.config.target.name = n.to_string();
        }
        if name.is_some() || !params.is_empty() {
            self.config
                .validate()
                .map_err(|(key, message)| self.error(&key, message))?;
        }
        Ok(())
    }

    fn splitter(&self) -> StreamSplitter {
        StreamSplitter::new(self.config.seed)
    }

    fn out_path(&self, file: &str) -> PathBuf {
        self.config.output.dir.join(file)
    }
}

/// Everything `fit`, `eval` and `check-grad` need.
pub struct Setup {
    pub target: Box<dyn TargetModel>,
    pub arch: Architecture,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub data: Matrix,
    pub test: Option<Matrix>,
}

pub fn build_target(config: &RunConfig) -> CliResult<Box<dyn TargetModel>> {
    Ok(vgp_core::targets::build_target(&config.target.spec())?)
}

pub fn build_architecture(config: &RunConfig, target: &dyn TargetModel) -> CliResult<Architecture> {
    let m = &config.model;
    let kind = match m.family {
        config::Family::Gaussian => FamilyKind::Gaussian,
        config::Family::Bernoulli => FamilyKind::Bernoulli,
        config::Family::Delta => FamilyKind::Delta,
    };
    let family = MeanFieldFamily::new(kind, target.latent_dim())?;
    let mode = match m.bound {
        config::Bound::Auto => BoundMode::for_target(target, &family),
        config::Bound::Analytic => BoundMode::Analytic,
        config::Bound::General => BoundMode::General,
    };
    let activation = match m.activation {
        config::Activation::Tanh => nets::Activation::Tanh,
        config::Activation::Relu => nets::Activation::Relu,
    };
    let obs = target.obs_dim();
    let mut arch = if m.kind == config::ModelKind::MeanField || m.anchors == 0 {
        Architecture::mean_field(family, obs, mode)
    } else {
        let c = config.input_dim(target.latent_dim());
        let mut a = Architecture::vgp(family, obs, c, m.anchors, mode);
        if m.aux == config::Aux::Network {
            a = a.with_aux_network(&m.aux_hidden, activation)?;
        }
        a
    };
    arch.kernel_kind = match m.kernel {
        config::Kernel::Ard => KernelKind::Ard,
        config::Kernel::Linear => KernelKind::Linear,
    };
    arch.jitter_rel = m.jitter_rel;
    if m.amortized {
        arch = arch.amortize_q(&m.q_hidden, activation)?;
    }
    arch.validate(target)?;
    Ok(arch)
}

pub fn init_config(config: &RunConfig) -> InitConfig {
    let i = &config.init;
    InitConfig {
        log_amplitude: i.log_amplitude,
        log_weight: i.log_weight,
        anchor_input_scale: i.anchor_input_scale,
        anchor_output_scale: i.anchor_output_scale,
        aux_log_variance: i.aux_log_variance,
    }
}

pub fn train_config(config: &RunConfig) -> TrainConfig {
    let o = &config.optimizer;
    TrainConfig {
        iterations: config.train.iterations,
        minibatch: config.train.minibatch,
        optimizer: OptimizerConfig {
            alpha: o.alpha,
            rho: o.rho,
            delta: o.delta,
            eps: o.eps,
        },
        baseline_decay: config.train.baseline_decay,
    }
}

/// Training and held-out observations. Targets without observations get a
/// single empty row.
fn datasets(loaded: &Loaded, target: &dyn TargetModel) -> CliResult<(Matrix, Option<Matrix>)> {
    let cfg = &loaded.config;
    if target.obs_dim() == 0 {
        return Ok((Matrix::zeros(1, 0), None));
    }
    let d = &cfg.data;
    let generator = if d.n_train > 0 || d.n_test > 0 {
        let t = &cfg.target;
        Some(make_tiny_dlgm(t.pixels, t.dim, t.generator_seed)?)
    } else {
        None
    };
    let mut rng = loaded.splitter().stream("data");
    let train = if !d.observations.is_empty() {
        Matrix::from_rows(&d.observations)?
    } else if let (Some(g), true) = (&generator, d.n_train > 0) {
        g.sample_dataset(d.n_train, &mut rng)
    } else {
        return Err(loaded.error("data", format!("target `{}` needs observations or n_train", cfg.target.name)));
    };
    let test = match (&generator, d.n_test) {
        (Some(g), n) if n > 0 => Some(g.sample_dataset(n, &mut rng)),
        _ => None,
    };
    Ok((train, test))
}

pub fn setup(loaded: &Loaded) -> CliResult<Setup> {
    let target = build_target(&loaded.config)?;
    let arch = build_architecture(&loaded.config, target.as_ref())?;
    let (data, test) = datasets(loaded, target.as_ref())?;
    Ok(Setup {
        arch,
        init: init_config(&loaded.config),
        train: train_config(&loaded.config),
        data,
        test,
        target,
    })
}

/// Per-iteration wall-clock time.
struct WallClock(Instant);

impl Clock for WallClock {
    fn elapsed_ms(&mut self) -> f64 {
        let now = Instant::now();
        let ms = now.duration_since(self.0).as_secs_f64() * 1e3;
        self.0 = now;
        ms
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Bound on `data`, optionally with the Monte Carlo draws split over threads.
pub fn evaluate(
    params: &ParameterVector,
    data: &Matrix,
    setup: &Setup,
    n_samples: usize,
    splitter: &StreamSplitter,
    threads: usize,
) -> CliResult<BoundEstimate> {
    let threads = threads.clamp(1, n_samples / 2);
    if threads == 1 {
        let mut rng = splitter.stream("eval");
        return Ok(train::evaluate_bound(params, data, setup.target.as_ref(), &setup.arch, n_samples, &mut rng)?);
    }
    eprintln!(
        "note: evaluation split over {threads} threads; the bound matches a rerun with the same thread count, not a single-threaded run"
    );
    let chunks: Vec<usize> = (0..threads)
        .map(|t| n_samples / threads + usize::from(t < n_samples % threads))
        .collect();
    let results: Vec<vgp_core::Result<Vec<(usize, f64, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                s.spawn(move || {
                    let mut rng = splitter.indexed("eval", t as u64);
                    (0..data.rows())
                        .map(|i| {
                            let e = vgp_core::autodiff::estimate_bound(
                                params,
                                data.row(i),
                                setup.target.as_ref(),
                                &setup.arch,
                                n,
                                &mut rng,
                            )?;
                            Ok((n, e.total, e.std_error))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let per_thread = results.into_iter().collect::<vgp_core::Result<Vec<_>>>()?;
    let points: Vec<(f64, f64)> = (0..data.rows())
        .map(|i| {
            let (mut sum, mut var) = (0.0, 0.0);
            for chunk in &per_thread {
                let (n, mean, se) = chunk[i];
                sum += n as f64 * mean;
                var += (n as f64 * se).powi(2);
            }
            let n = n_samples as f64;
            (sum / n, var.sqrt() / n)
        })
        .collect();
    Ok(train::combine_point_bounds(&points))
}

/// Mean exact `log p(x)` over the rows, when the target knows it.
fn mean_evidence(target: &dyn TargetModel, data: &Matrix) -> Option<f64> {
    let mut sum = 0.0;
    for i in 0..data.rows() {
        sum += target.exact_log_evidence(data.row(i))?;
    }
    Some(sum / data.rows() as f64)
}

fn report_bound(label: &str, est: &BoundEstimate, n_samples: usize, evidence: Option<f64>) {
    println!(
        "{label:<10} {:.6} ± {:.6} (SE, {n_samples} samples per observation)",
        est.mean, est.std_error
    );
    if let Some(ev) = evidence {
        println!("{:<10} {ev:.6} (exact, gap {:.6})", "log p(x)", ev - est.mean);
    }
}

pub fn fit(opts: &Options) -> CliResult<()> {
    let loaded = Loaded::load(opts)?;
    let setup = setup(&loaded)?;
    let cfg = &loaded.config;
    let splitter = loaded.splitter();
    let init = setup.arch.init_params(&setup.init, &mut splitter.stream("init"));

    create_dir(&cfg.output.dir)?;
    let trace_path = loaded.out_path(&cfg.output.trace);
    let ckpt_path = loaded.out_path(&cfg.output.checkpoint);

    let mut clock: Box<dyn Clock> = if cfg.output.timing {
        Box::new(WallClock(Instant::now()))
    } else {
        Box::new(NoClock)
    };
    let result = train::fit(
        &setup.data,
        setup.target.as_ref(),
        &setup.arch,
        &setup.train,
        init,
        &mut splitter.stream("train"),
        clock.as_mut(),
    );
    let (params, trace) = match result {
        Ok(out) => (out.params, out.trace),
        Err(failure) => {
            let mut buf = Vec::new();
            output::write_trace(&failure.trace, &mut buf)?;
            write_file(&trace_path, &buf)?;
            eprintln!(
                "training stopped at iteration {}; trace written to {}",
                failure.trace.len() + 1,
                trace_path.display()
            );
            return Err(failure.error.into());
        }
    };
    let mut buf = Vec::new();
    output::write_trace(&trace, &mut buf)?;
    write_file(&trace_path, &buf)?;
    write_file(&ckpt_path, &checkpoint::encode(&params))?;

    let n = cfg.train.eval_samples;
    let est = evaluate(&params, &setup.data, &setup, n, &splitter, opts.threads)?;
    println!("{:<10} {}", "iterations", trace.len());
    report_bound("bound", &est, n, mean_evidence(setup.target.as_ref(), &setup.data));
    println!("{:<10} {}", "trace", trace_path.display());
    println!("{:<10} {}", "checkpoint", ckpt_path.display());
    Ok(())
}

pub fn eval(opts: &Options, checkpoint_path: Option<&Path>) -> CliResult<()> {
    let loaded = Loaded::load(opts)?;
    let setup = setup(&loaded)?;
    let cfg = &loaded.config;
    let path = checkpoint_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| loaded.out_path(&cfg.output.checkpoint));
    let bytes = fs::read(&path).map_err(|source| CliError::Read {
        path: path.clone(),
        source,
    })?;
    let params = checkpoint::decode(&bytes)?;
    if params.layout != setup.arch.layout() {
        let names: Vec<String> = params.layout.iter().map(|s| format!("{}[{}]", s.name, s.len)).collect();
        return Err(CheckpointError::Mismatch(names.join(", ")).into());
    }
    let (data, label) = match &setup.test {
        Some(t) => (t, "held-out"),
        None => (&setup.data, "bound"),
    };
    let n = cfg.train.eval_samples;
    let est = evaluate(&params, data, &setup, n, &loaded.splitter(), opts.threads)?;
    report_bound(label, &est, n, mean_evidence(setup.target.as_ref(), data));
    Ok(())
}

/// Moves every coordinate off its structured initial value.
fn jitter_params<R: Rng + ?Sized>(params: &mut ParameterVector, scale: f64, rng: &mut R) {
    for v in &mut params.flat {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
}

const CHECK_PERTURBATION: f64 = 0.1;
/// Per-coordinate z-score accepted by the score-function check.
pub const SCORE_Z_LIMIT: f64 = 3.0;

pub fn check_grad(opts: &Options) -> CliResult<()> {
    let loaded = Loaded::load(opts)?;
    let mut setup = setup(&loaded)?;
    let cfg = &loaded.config.check_grad;
    if cfg.fault == config::FaultSetting::KernelPullback {
        if setup.arch.kind != vgp_core::autodiff::VariationalKind::Vgp {
            return Err(loaded.error("check_grad.fault", "the kernel pullback fault needs a VGP model"));
        }
        setup.arch.fault = Some(Fault::KernelPullback);
    }
    let splitter = loaded.splitter();
    if setup.arch.family.kind == FamilyKind::Bernoulli {
        return check_score(&loaded, &setup, &splitter);
    }

    let target = setup.target.as_ref();
    let arch = &setup.arch;
    // (segment, worst error, coordinate, point)
    let mut worst: Vec<(String, f64, usize, usize)> = Vec::new();
    for p in 0..cfg.points {
        let mut rng = splitter.indexed("check", p as u64);
        let mut params = arch.init_params(&setup.init, &mut rng);
        jitter_params(&mut params, CHECK_PERTURBATION, &mut rng);
        let noise = arch.draw_noise(&mut rng);
        let x = setup.data.row(p % setup.data.rows());
        let report = objective_with_gradient(&params, x, target, arch, &noise)?;
        let mut probe = params.clone();
        let numeric = finite_diff_gradient(
            |flat| {
                probe.flat.copy_from_slice(flat);
                objective_at_noise(&probe, x, target, arch, &noise).map_or(f64::NAN, |t| t.total())
            },
            &params.flat,
            cfg.step,
        );
        for (k, (name, err, idx)) in compare_gradients(&report.grad, &numeric, &params.layout)
            .into_iter()
            .enumerate()
        {
            if worst.len() <= k {
                worst.push((name, err, idx, p));
            } else if err > worst[k].1 || err.is_nan() {
                worst[k] = (name, err, idx, p);
            }
        }
    }
    println!("{:<22} {:>12} {:>11} {:>6}", "segment", "max rel err", "coordinate", "point");
    for (name, err, idx, p) in &worst {
        println!("{name:<22} {err:>12.3e} {idx:>11} {p:>6}");
    }
    let failing: Vec<String> = worst
        .iter()
        .filter(|w| !(w.1 < cfg.tolerance))
        .map(|(name, err, idx, p)| format!("{name} coordinate {idx} (point {p}): {err:.3e}"))
        .collect();
    if failing.is_empty() {
        println!("all segments below {:.0e} over {} points", cfg.tolerance, cfg.points);
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed (tolerance {:.0e}): {}",
            cfg.tolerance,
            failing.join("; ")
        )))
    }
}

/// `|mean − oracle| / SE`; a zero-spread coordinate must match to `1e-9`.
fn score_z(oracle: f64, mean: f64, se: f64) -> f64 {
    vgp_core::autodiff::ScoreCheck {
        oracle: vec![oracle],
        mean: vec![mean],
        std_error: vec![se],
        n_samples: 0,
    }
    .max_z()
}

fn check_score(loaded: &Loaded, setup: &Setup, splitter: &StreamSplitter) -> CliResult<()> {
    let cfg = &loaded.config.check_grad;
    let mut rng = splitter.stream("check");
    let mut params = setup.arch.init_params(&setup.init, &mut rng);
    jitter_params(&mut params, CHECK_PERTURBATION, &mut rng);
    let noise = setup.arch.draw_noise(&mut rng);
    let mut baseline = ScoreBaseline::new(loaded.config.train.baseline_decay);
    let check = score_check(
        &params,
        setup.data.row(0),
        setup.target.as_ref(),
        &setup.arch,
        &noise.xi,
        &noise.eta,
        cfg.score_samples,
        Some(&mut baseline),
        &mut rng,
    )?;
    println!("score-function gradient vs enumeration, {} samples", check.n_samples);
    println!("{:<22} {:>10} {:>11}", "segment", "max |z|", "coordinate");
    let mut failing = Vec::new();
    for seg in &params.layout {
        let (z, idx) = seg
            .range()
            .map(|i| (score_z(check.oracle[i], check.mean[i], check.std_error[i]), i))
            .fold((0.0, seg.offset), |a, b| if b.0 > a.0 || b.0.is_nan() { b } else { a });
        println!("{:<22} {z:>10.3} {idx:>11}", seg.name);
        if !(z < SCORE_Z_LIMIT) {
            failing.push(format!("{} coordinate {idx}: z = {z:.2}", seg.name));
        }
    }
    if failing.is_empty() {
        println!("all coordinates within {SCORE_Z_LIMIT} standard errors of the enumeration oracle");
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "score-function check failed: {}",
            failing.join("; ")
        )))
    }
}

pub fn universal(opts: &Options, target: Option<&str>, k_max: Option<u32>, params: &[String]) -> CliResult<()> {
    let mut loaded = Loaded::load(opts)?;
    loaded.override_target(target, params)?;
    if let Some(k) = k_max {
        loaded.config.universal.k_max = k;
        loaded
            .config
            .validate()
            .map_err(|(key, message)| CliError::Usage(format!("--k-max: {key}: {message}")))?;
    }
    let cfg = &loaded.config;
    let u = &cfg.universal;
    let model = build_target(cfg)?;
    let kernel = match u.kernel {
        config::UniversalKernel::SpacingMatched => AnchorKernel::SpacingMatched,
        config::UniversalKernel::Fixed => AnchorKernel::Fixed(KernelParams::ard(u.log_amplitude, vec![u.log_weight])),
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut anchor_error: f64 = 0.0;
    for s in 0..u.seeds as u64 {
        let seed = cfg.seed.wrapping_add(s);
        let mut rng = StreamSplitter::new(seed).stream("universal");
        let table = convergence_experiment(model.as_ref(), u.k_max, &kernel, u.samples, &mut rng)?;
        let ks: Vec<f64> = table.iter().map(|r| r.ks).collect();
        if !is_monotone(&ks, u.tolerance) {
            failures.push(seed);
        }
        for r in &table {
            anchor_error = anchor_error.max(r.anchor_error);
            rows.push(UniversalRow {
                k: r.k,
                ks: r.ks,
                n: r.n,
                seed,
            });
        }
    }

    create_dir(&cfg.output.dir)?;
    let path = loaded.out_path(&cfg.output.universal);
    let mut buf = Vec::new();
    output::write_universal(&rows, &mut buf)?;
    write_file(&path, &buf)?;

    println!("target {}, {} samples, {} seeds", cfg.target.name, u.samples, u.seeds);
    println!("{:>3} {:>10} {:>10}", "k", "mean KS", "max KS");
    for k in 1..=u.k_max {
        let ks: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.ks).collect();
        let mean = ks.iter().sum::<f64>() / ks.len() as f64;
        let max = ks.iter().copied().fold(0.0, f64::max);
        println!("{k:>3} {mean:>10.5} {max:>10.5}");
    }
    println!("max anchor interpolation error {anchor_error:.2e}");
    println!("wrote {}", path.display());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "KS did not decrease (tolerance {}) for seeds {:?}",
            u.tolerance, failures
        )))
    }
}

pub fn oracle_report(loaded: &Loaded) -> CliResult<OracleReport> {
    let cfg = &loaded.config;
    let model = build_target(cfg)?;
    let x: Vec<f64> = if model.obs_dim() == 0 {
        Vec::new()
    } else {
        let (data, _) = match (cfg.data.observations.is_empty(), cfg.target.name.as_str()) {
            (true, "tiny_dlgm") if cfg.data.n_train == 0 => {
                let mut with_one = loaded.clone();
                with_one.config.data.n_train = 1;
                datasets(&with_one, model.as_ref())?
            }
            _ => datasets(loaded, model.as_ref())?,
        };
        data.row(0).to_vec()
    };
    let (moments, method) = match model.exact_moments(&x) {
        Some(m) => (m, "target"),
        None => {
            let m = oracle_moments(model.as_ref(), &x)?;
            (m, if model.is_discrete() { "enumeration" } else { "quadrature" })
        }
    };
    let d = model.latent_dim();
    Ok(OracleReport {
        target: cfg.target.name.clone(),
        latent_dim: d,
        log_evidence: model.exact_log_evidence(&x),
        observation: x,
        mean: moments.mean.clone(),
        covariance: (0..d).map(|i| moments.covariance.row(i).to_vec()).collect(),
        moments_method: method,
    })
}

pub fn oracle(opts: &Options, target: Option<&str>, params: &[String]) -> CliResult<()> {
    let mut loaded = Loaded::load(opts)?;
    loaded.override_target(target, params)?;
    let report = oracle_report(&loaded)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
