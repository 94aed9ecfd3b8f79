//! Run configuration: a TOML document with one table per concern.
//!
//! Every field has a default, so a config only needs the keys it changes.
//! Validation happens once, before anything is built, and every diagnostic
//! carries the line of the offending key when it can be found.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use vgp_core::targets::{TargetSpec, KNOWN_TARGETS};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub target: TargetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub check_grad: CheckGradSection,
    #[serde(default)]
    pub universal: UniversalSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
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

impl Default for TargetSection {
    fn default() -> Self {
        let s = TargetSpec::default();
        Self {
            name: s.name,
            dim: s.dim,
            rho: s.rho,
            weights: s.weights,
            means: s.means,
            sds: s.sds,
            curvature: s.curvature,
            pixels: s.pixels,
            generator_seed: s.generator_seed,
            table: s.table,
            noise_var: s.noise_var,
        }
    }
}

impl TargetSection {
    pub fn spec(&self) -> TargetSpec {
        TargetSpec {
            name: self.name.clone(),
            dim: self.dim,
            rho: self.rho,
            weights: self.weights.clone(),
            means: self.means.clone(),
            sds: self.sds.clone(),
            curvature: self.curvature,
            pixels: self.pixels,
            generator_seed: self.generator_seed,
            table: self.table.clone(),
            noise_var: self.noise_var,
        }
    }

    /// Sets one field from a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.trim()
                .parse()
                .map_err(|_| format!("`{key}` expects a number, got `{v}`"))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>, String> {
            v.split(',').map(|p| num(key, p)).collect()
        }
        match key {
            "name" => self.name = value.to_string(),
            "dim" => self.dim = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "weights" => self.weights = list(key, value)?,
            "means" => self.means = list(key, value)?,
            "sds" => self.sds = list(key, value)?,
            "curvature" => self.curvature = num(key, value)?,
            "pixels" => self.pixels = num(key, value)?,
            "generator_seed" => self.generator_seed = num(key, value)?,
            "table" => self.table = list(key, value)?,
            "noise_var" => self.noise_var = num(key, value)?,
            _ => return Err(format!("unknown target parameter `{key}`")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vgp,
    MeanField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Bernoulli,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Ard,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Analytic prior KL when the target and family allow it.
    Auto,
    Analytic,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aux {
    Global,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub family: Family,
    /// Latent input dimension `c`; the target's latent dimension when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    /// Zero anchors means a plain mean-field model.
    pub anchors: usize,
    pub kernel: Kernel,
    pub jitter_rel: f64,
    pub bound: Bound,
    pub amortized: bool,
    pub q_hidden: Vec<usize>,
    pub aux: Aux,
    pub aux_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Vgp,
            family: Family::Gaussian,
            input_dim: None,
            anchors: 20,
            kernel: Kernel::Ard,
            jitter_rel: vgp_core::kernel::DEFAULT_JITTER_REL,
            bound: Bound::Auto,
            amortized: false,
            q_hidden: vec![32],
            aux: Aux::Global,
            aux_hidden: vec![32],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub log_amplitude: f64,
    pub log_weight: f64,
    pub anchor_input_scale: f64,
    pub anchor_output_scale: f64,
    pub aux_log_variance: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        let d = vgp_core::autodiff::InitConfig::default();
        Self {
            log_amplitude: d.log_amplitude,
            log_weight: d.log_weight,
            anchor_input_scale: d.anchor_input_scale,
            anchor_output_scale: d.anchor_output_scale,
            aux_log_variance: d.aux_log_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub alpha: f64,
    pub rho: f64,
    pub delta: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = vgp_core::train::OptimizerConfig::default();
        Self {
            alpha: d.alpha,
            rho: d.rho,
            delta: d.delta,
            eps: d.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub minibatch: usize,
    pub baseline_decay: f64,
    /// Monte Carlo samples per observation for the reported bound.
    pub eval_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            minibatch: 1,
            baseline_decay: vgp_core::autodiff::DEFAULT_BASELINE_DECAY,
            eval_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Explicit observations, one row each.
    pub observations: Vec<Vec<f64>>,
    /// Observations drawn from the target's generator (tiny_dlgm only).
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultSetting {
    None,
    KernelPullback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckGradSection {
    pub points: usize,
    pub tolerance: f64,
    pub step: f64,
    pub fault: FaultSetting,
    /// Samples for the score-function check on discrete families.
    pub score_samples: usize,
}

impl Default for CheckGradSection {
    fn default() -> Self {
        Self {
            points: 5,
            tolerance: 1e-4,
            step: vgp_core::autodiff::FD_STEP,
            fault: FaultSetting::None,
            score_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniversalKernel {
    SpacingMatched,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniversalSection {
    pub k_max: u32,
    pub samples: usize,
    pub seeds: usize,
    pub kernel: UniversalKernel,
    /// Used by the `fixed` kernel.
    pub log_amplitude: f64,
    pub log_weight: f64,
    pub tolerance: f64,
}

impl Default for UniversalSection {
    fn default() -> Self {
        Self {
            k_max: 5,
            samples: 4000,
            seeds: 5,
            kernel: UniversalKernel::SpacingMatched,
            log_amplitude: 0.0,
            log_weight: 0.0,
            tolerance: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub trace: String,
    pub checkpoint: String,
    pub universal: String,
    /// Fill the trace `ms` column with wall-clock time. Off by default so
    /// that repeated runs write byte-identical traces.
    pub timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            trace: "trace.csv".into(),
            checkpoint: "checkpoint.vgp".into(),
            universal: "universal.csv".into(),
            timing: false,
        }
    }
}

/// A config problem, with the 1-based line it refers to when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: ", self.origin, l)?,
            None => write!(f, "{}: ", self.origin)?,
        }
        if !self.key.is_empty() {
            write!(f, "{}: ", self.key)?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Line of `key` inside `[section]` (or at top level when `section` is
/// empty); falls back to the section header.
pub fn locate(source: &str, path: &str) -> Option<usize> {
    let (section, key) = match path.split_once('.') {
        Some((s, k)) => (s, k),
        None => ("", path),
    };
    let mut current = "";
    let mut header = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            if k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    header
}

impl RunConfig {
    /// Parses and validates. `origin` names the source in diagnostics.
    pub fn parse(source: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(source).map_err(|e| ConfigError {
            origin: origin.to_string(),
            line: e.span().map(|s| line_of(source, s.start)),
            key: String::new(),
            message: e.message().trim().to_string(),
        })?;
        config.validate().map_err(|(key, message)| ConfigError {
            origin: origin.to_string(),
            line: locate(source, &key),
            key,
            message,
        })?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The first violated rule as `(key path, message)`.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |key: &str, msg: String| Err((key.to_string(), msg));
        let t = &self.target;
        if !KNOWN_TARGETS.contains(&t.name.as_str()) {
            return err(
                "target.name",
                format!("unknown target `{}`; known targets: {}", t.name, KNOWN_TARGETS.join(", ")),
            );
        }
        let target = match vgp_core::targets::build_target(&t.spec()) {
            Ok(b) => b,
            Err(e) => return err("target", e.to_string()),
        };
        let m = &self.model;
        if m.kind == ModelKind::Vgp && m.input_dim == Some(0) {
            return err("model.input_dim", "latent input dimension must be at least 1".into());
        }
        if !(m.jitter_rel > 0.0 && m.jitter_rel <= vgp_core::kernel::MAX_JITTER_REL) {
            return err("model.jitter_rel", "must lie in (0, 1e-4]".into());
        }
        if target.is_discrete() != (m.family == Family::Bernoulli) {
            return err(
                "model.family",
                format!(
                    "target `{}` needs the {} family",
                    t.name,
                    if target.is_discrete() { "bernoulli" } else { "gaussian or delta" }
                ),
            );
        }
        if m.family == Family::Delta && (m.kind == ModelKind::MeanField || m.anchors == 0) {
            return err("model.family", "the delta family has no density without the VGP mapping".into());
        }
        match m.bound {
            Bound::Analytic if !(target.analytic_prior_kl() && m.family == Family::Gaussian) => {
                return err("model.bound", format!("target `{}` has no analytic prior KL", t.name));
            }
            _ => {}
        }
        if m.amortized && target.obs_dim() == 0 {
            return err("model.amortized", "amortization needs observations".into());
        }
        if m.q_hidden.contains(&0) {
            return err("model.q_hidden", "hidden widths must be positive".into());
        }
        if m.aux_hidden.contains(&0) {
            return err("model.aux_hidden", "hidden widths must be positive".into());
        }

        let i = &self.init;
        for (k, v) in [
            ("init.log_amplitude", i.log_amplitude),
            ("init.log_weight", i.log_weight),
            ("init.aux_log_variance", i.aux_log_variance),
        ] {
            if !v.is_finite() {
                return err(k, "must be finite".into());
            }
        }
        if !(i.anchor_input_scale >= 0.0) || !(i.anchor_output_scale >= 0.0) {
            return err("init", "initial scales must be non-negative".into());
        }

        let o = &self.optimizer;
        if !(o.alpha > 0.0 && o.alpha.is_finite()) {
            return err("optimizer.alpha", "must be positive".into());
        }
        if !(0.0..1.0).contains(&o.rho) {
            return err("optimizer.rho", "must lie in [0, 1)".into());
        }
        if !(o.delta > 0.0) {
            return err("optimizer.delta", "must be positive".into());
        }
        if !(o.eps > 0.0) {
            return err("optimizer.eps", "must be positive".into());
        }

        let tr = &self.train;
        if tr.minibatch == 0 {
            return err("train.minibatch", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&tr.baseline_decay) {
            return err("train.baseline_decay", "must lie in [0, 1)".into());
        }
        if tr.eval_samples < vgp_core::train::MIN_EVAL_SAMPLES {
            return err("train.eval_samples", format!("must be at least {}", vgp_core::train::MIN_EVAL_SAMPLES));
        }

        let data = &self.data;
        let obs = target.obs_dim();
        if let Some(row) = data.observations.iter().find(|r| r.len() != obs) {
            return err(
                "data.observations",
                format!("target `{}` has {obs}-dimensional observations, got a row of length {}", t.name, row.len()),
            );
        }
        if data.observations.iter().flatten().any(|v| !v.is_finite()) {
            return err("data.observations", "entries must be finite".into());
        }
        if (data.n_train > 0 || data.n_test > 0) && t.name != "tiny_dlgm" {
            return err("data.n_train", format!("target `{}` has no generator; list observations instead", t.name));
        }

        let c = &self.check_grad;
        if c.points == 0 {
            return err("check_grad.points", "must be at least 1".into());
        }
        if !(c.tolerance > 0.0) {
            return err("check_grad.tolerance", "must be positive".into());
        }
        if !(c.step > 0.0) {
            return err("check_grad.step", "must be positive".into());
        }
        if c.score_samples < 2 {
            return err("check_grad.score_samples", "must be at least 2".into());
        }

        let u = &self.universal;
        if u.k_max == 0 || u.k_max > vgp_core::universal::MAX_LEVEL {
            return err("universal.k_max", format!("must lie in 1..={}", vgp_core::universal::MAX_LEVEL));
        }
        if u.samples == 0 || u.seeds == 0 {
            return err("universal", "samples and seeds must be positive".into());
        }
        if !(u.tolerance >= 0.0) {
            return err("universal.tolerance", "must be non-negative".into());
        }

        if self.output.trace.is_empty() || self.output.checkpoint.is_empty() || self.output.universal.is_empty() {
            return err("output", "file names must be non-empty".into());
        }
        Ok(())
    }

    /// Latent input dimension, defaulting to the target's latent dimension.
    pub fn input_dim(&self, latent_dim: usize) -> usize {
        self.model.input_dim.unwrap_or(latent_dim)
    }
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("", "t").unwrap(), RunConfig::default());
    }

    #[test]
    fn locate_finds_key_in_section() {
        let src = "seed = 1\n[model]\nanchors = 0\n[train]\nanchors = 3\n";
        assert_eq!(locate(src, "model.anchors"), Some(3));
        assert_eq!(locate(src, "seed"), Some(1));
        assert_eq!(locate(src, "model.kind"), Some(2));
        assert_eq!(locate(src, "data.n_train"), None);
    }
}
