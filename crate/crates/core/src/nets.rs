//! Feed-forward inference networks.
//!
//! The q-network maps an observation `x` to per-datapoint variational data
//! (anchor inputs and outputs); the r-network maps `(x, z)` to the mean and
//! log-variance of the diagonal Gaussian auxiliary model. In global mode the
//! variational data are free parameters shared by every data point.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;

use crate::error::{check_len, contract, Result};
use crate::kernel::VariationalData;
use crate::linalg::Matrix;
use crate::objective::AuxiliaryParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - y * y,
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Exp,
}

/// A named slice of the final layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub name: String,
    pub width: usize,
    pub link: Link,
    /// Initial value of this head's biases.
    pub bias_init: f64,
}

impl Head {
    pub fn new(name: &str, width: usize, link: Link) -> Self {
        Self {
            name: name.into(),
            width,
            link,
            bias_init: 0.0,
        }
    }

    pub fn with_bias_init(mut self, bias: f64) -> Self {
        self.bias_init = bias;
        self
    }
}

/// Layer widths run from the input width to the output width; hidden layers
/// use `activation`, the final layer is affine and then split into heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub heads: Vec<Head>,
}

impl FeedforwardSpec {
    pub fn new(input: usize, hidden: &[usize], activation: Activation, heads: Vec<Head>) -> Result<Self> {
        let out: usize = heads.iter().map(|h| h.width).sum();
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(out);
        let spec = Self {
            layer_widths,
            activation,
            heads,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(contract("a network needs at least one layer"));
        }
        let out: usize = self.heads.iter().map(|h| h.width).sum();
        check_len("network heads vs output width", self.output_width(), out)
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn head_range(&self, name: &str) -> Option<Range<usize>> {
        let mut start = 0;
        for h in &self.heads {
            if h.name == name {
                return Some(start..start + h.width);
            }
            start += h.width;
        }
        None
    }

    /// `(weight range, bias range)` of layer `l` within the flat parameters.
    fn layer_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let mut off = 0;
        for w in self.layer_widths.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (fan_in, fan_out) = (self.layer_widths[l], self.layer_widths[l + 1]);
        let w = off..off + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        (w, b)
    }

    /// Glorot-uniform weights, biases from each head's `bias_init` (zero for
    /// hidden layers).
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut weights = vec![0.0; self.param_count()];
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_widths[l], self.layer_widths[l + 1]);
            let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let (wr, br) = self.layer_ranges(l);
            for w in &mut weights[wr] {
                *w = rng.random_range(-a..=a);
            }
            if l + 1 == self.num_layers() {
                let mut o = br.start;
                for h in &self.heads {
                    for b in &mut weights[o..o + h.width] {
                        *b = h.bias_init;
                    }
                    o += h.width;
                }
            }
        }
        weights
    }
}

/// Activations recorded by [`forward_taped`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Input to each layer; `layer_inputs[0]` is the network input.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Final layer output after links.
    output: Vec<f64>,
}

impl ForwardTape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn affine(weights: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let fan_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

/// Runs the network and returns the linked output (heads concatenated).
pub fn forward(spec: &FeedforwardSpec, weights: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    forward_taped(spec, weights, input).map(|t| t.output)
}

pub fn forward_taped(spec: &FeedforwardSpec, weights: &[f64], input: &[f64]) -> Result<ForwardTape> {
    check_len("network input", spec.input_width(), input.len())?;
    check_len("network weights", spec.param_count(), weights.len())?;
    let layers = spec.num_layers();
    let mut layer_inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers.saturating_sub(1));
    let mut h = input.to_vec();
    for l in 0..layers {
        let (wr, br) = spec.layer_ranges(l);
        let z = affine(&weights[wr], &weights[br], &h);
        layer_inputs.push(h);
        if l + 1 < layers {
            h = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z);
        } else {
            h = z;
        }
    }
    let mut o = 0;
    for head in &spec.heads {
        if head.link == Link::Exp {
            for v in &mut h[o..o + head.width] {
                *v = v.exp();
            }
        }
        o += head.width;
    }
    Ok(ForwardTape {
        layer_inputs,
        pre,
        output: h,
    })
}

/// Backpropagates `out_bar` (adjoint of the linked output). Weight adjoints
/// are accumulated into `weights_bar`; the input adjoint is returned.
pub fn backward(
    spec: &FeedforwardSpec,
    weights: &[f64],
    tape: &ForwardTape,
    out_bar: &[f64],
    weights_bar: &mut [f64],
) -> Vec<f64> {
    let mut delta = out_bar.to_vec();
    let mut o = 0;
    for head in &spec.heads {
        if head.link == Link::Exp {
            for i in o..o + head.width {
                delta[i] *= tape.output[i];
            }
        }
        o += head.width;
    }
    for l in (0..spec.num_layers()).rev() {
        let (wr, br) = spec.layer_ranges(l);
        let input = &tape.layer_inputs[l];
        let fan_in = input.len();
        for (ob, &d) in delta.iter().enumerate() {
            weights_bar[br.start + ob] += d;
            let row = &mut weights_bar[wr.start + ob * fan_in..wr.start + (ob + 1) * fan_in];
            for (wb, &x) in row.iter_mut().zip(input) {
                *wb += d * x;
            }
        }
        let w = &weights[wr];
        let mut in_bar = vec![0.0; fan_in];
        for (ob, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (ib, &wv) in in_bar.iter_mut().zip(&w[ob * fan_in..(ob + 1) * fan_in]) {
                *ib += d * wv;
            }
        }
        if l > 0 {
            let pre = &tape.pre[l - 1];
            for (ib, (&x, &y)) in in_bar.iter_mut().zip(pre.iter().zip(input)) {
                *ib *= spec.activation.derivative(x, y);
            }
        }
        delta = in_bar;
    }
    delta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmortizationMode {
    /// Variational data come from a network evaluated on each observation.
    Amortized,
    /// Variational data are free parameters shared across observations.
    Global,
}

/// Shape of the q-side parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct QSide {
    pub mode: AmortizationMode,
    pub anchors: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Present in amortized mode.
    pub net: Option<FeedforwardSpec>,
}

impl QSide {
    pub fn global(anchors: usize, input_dim: usize, output_dim: usize) -> Self {
        Self {
            mode: AmortizationMode::Global,
            anchors,
            input_dim,
            output_dim,
            net: None,
        }
    }

    pub fn amortized(
        obs_dim: usize,
        hidden: &[usize],
        activation: Activation,
        anchors: usize,
        input_dim: usize,
        output_dim: usize,
    ) -> Result<Self> {
        let heads = vec![
            Head::new("inputs", anchors * input_dim, Link::Identity),
            Head::new("outputs", anchors * output_dim, Link::Identity),
        ];
        Ok(Self {
            mode: AmortizationMode::Amortized,
            anchors,
            input_dim,
            output_dim,
            net: Some(FeedforwardSpec::new(obs_dim, hidden, activation, heads)?),
        })
    }

    pub fn param_count(&self) -> usize {
        match &self.net {
            Some(net) => net.param_count(),
            None => self.anchors * (self.input_dim + self.output_dim),
        }
    }

    fn split_flat(&self, flat: &[f64]) -> Result<VariationalData> {
        let ni = self.anchors * self.input_dim;
        let inputs = Matrix::from_vec(self.anchors, self.input_dim, flat[..ni].to_vec())?;
        let outputs = Matrix::from_vec(self.anchors, self.output_dim, flat[ni..].to_vec())?;
        VariationalData::new(inputs, outputs)
    }
}

/// Variational data for one observation.
pub fn q_params_for(x: &[f64], q: &QSide, weights: &[f64]) -> Result<VariationalData> {
    check_len("q parameters", q.param_count(), weights.len())?;
    match &q.net {
        None => q.split_flat(weights),
        Some(net) => q.split_flat(&forward(net, weights, x)?),
    }
}

/// r-network: `(x, z) ↦ (mean, log_variance)` over `(ξ, f)`.
pub fn r_network_spec(
    obs_dim: usize,
    latent_dim: usize,
    aux_dim: usize,
    hidden: &[usize],
    activation: Activation,
) -> Result<FeedforwardSpec> {
    FeedforwardSpec::new(
        obs_dim + latent_dim,
        hidden,
        activation,
        vec![
            Head::new("mean", aux_dim, Link::Identity),
            Head::new("log_variance", aux_dim, Link::Identity).with_bias_init(-1.0),
        ],
    )
}

pub fn r_params_for(x: &[f64], z: &[f64], spec: &FeedforwardSpec, weights: &[f64]) -> Result<AuxiliaryParams> {
    let mut input = Vec::with_capacity(x.len() + z.len());
    input.extend_from_slice(x);
    input.extend_from_slice(z);
    let out = forward(spec, weights, &input)?;
    let half = out.len() / 2;
    Ok(AuxiliaryParams {
        mean: out[..half].to_vec(),
        log_variance: out[half..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamSplitter;

    fn two_layer() -> FeedforwardSpec {
        FeedforwardSpec::new(
            3,
            &[4],
            Activation::Tanh,
            vec![Head::new("a", 2, Link::Identity), Head::new("b", 1, Link::Exp)],
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = FeedforwardSpec::new(3, &[5], Activation::Tanh, vec![Head::new("o", 2, Link::Identity)]).unwrap();
        let out = forward(&spec, &vec![0.0; spec.param_count()], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let spec = FeedforwardSpec::new(2, &[], Activation::Relu, vec![Head::new("o", 2, Link::Identity)]).unwrap();
        // W = [[1,2],[3,4]], b = [0.5,-1]
        let w = [1.0, 2.0, 3.0, 4.0, 0.5, -1.0];
        let out = forward(&spec, &w, &[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![-0.5, -2.0]);
    }

    #[test]
    fn matches_straightforward_reimplementation() {
        let spec = two_layer();
        let w = spec.init_weights(&mut StreamSplitter::new(1).stream("w"));
        let x = [0.3, -1.2, 0.8];
        // Independent evaluation with explicit indexing.
        let w1 = &w[0..12];
        let b1 = &w[12..16];
        let w2 = &w[16..28];
        let b2 = &w[28..31];
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut s = b1[i];
            for j in 0..3 {
                s += w1[i * 3 + j] * x[j];
            }
            h[i] = s.tanh();
        }
        let mut o = [0.0; 3];
        for i in 0..3 {
            let mut s = b2[i];
            for j in 0..4 {
                s += w2[i * 4 + j] * h[j];
            }
            o[i] = s;
        }
        o[2] = o[2].exp();
        let out = forward(&spec, &w, &x).unwrap();
        for (a, b) in out.iter().zip(&o) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let spec = two_layer();
        assert!(forward(&spec, &vec![0.0; spec.param_count()], &[1.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut spec = two_layer();
            spec.activation = act;
            let w = spec.init_weights(&mut StreamSplitter::new(2).stream("w"));
            let x = [0.5, -0.4, 1.1];
            let ob = [0.3, -0.7, 1.2];
            let loss = |w: &[f64], x: &[f64]| {
                forward(&spec, w, x).unwrap().iter().zip(&ob).map(|(a, b)| a * b).sum::<f64>()
            };
            let tape = forward_taped(&spec, &w, &x).unwrap();
            let mut wb = vec![0.0; w.len()];
            let xb = backward(&spec, &w, &tape, &ob, &mut wb);
            let h = 1e-6;
            for i in 0..w.len() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * h);
                assert!((fd - wb[i]).abs() < 1e-6, "w{i}: {fd} vs {}", wb[i]);
            }
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * h);
                assert!((fd - xb[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn global_mode_ignores_observation() {
        let q = QSide::global(2, 1, 2);
        let w = [0.1, 0.2, 1.0, 2.0, 3.0, 4.0];
        let a = q_params_for(&[1.0], &q, &w).unwrap();
        let b = q_params_for(&[-7.0, 3.0], &q, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn amortized_zero_weights_give_origin_anchors() {
        let q = QSide::amortized(4, &[8], Activation::Tanh, 3, 2, 4).unwrap();
        let d = q_params_for(&[1.0, 0.0, 1.0, 1.0], &q, &vec![0.0; q.param_count()]).unwrap();
        assert!(d.inputs.as_slice().iter().all(|&v| v == 0.0));
        assert!(d.outputs.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amortized_shapes_round_trip() {
        let q = QSide::amortized(4, &[8], Activation::Tanh, 3, 2, 4).unwrap();
        let w = q.net.as_ref().unwrap().init_weights(&mut StreamSplitter::new(3).stream("q"));
        let x = [1.0, 0.0, 0.5, 1.0];
        let d = q_params_for(&x, &q, &w).unwrap();
        assert_eq!((d.inputs.rows(), d.inputs.cols()), (3, 2));
        assert_eq!((d.outputs.rows(), d.outputs.cols()), (3, 4));
        let flat = forward(q.net.as_ref().unwrap(), &w, &x).unwrap();
        let mut back = d.inputs.as_slice().to_vec();
        back.extend_from_slice(d.outputs.as_slice());
        assert_eq!(back, flat);
    }

    #[test]
    fn r_network_zero_weights_and_shapes() {
        let spec = r_network_spec(3, 2, 6, &[5], Activation::Tanh).unwrap();
        let aux = r_params_for(&[1.0, 2.0, 3.0], &[0.5, -0.5], &spec, &vec![0.0; spec.param_count()]).unwrap();
        assert_eq!(aux.mean, vec![0.0; 6]);
        assert_eq!(aux.log_variance, vec![0.0; 6]);
    }

    #[test]
    fn r_network_depends_on_z() {
        let spec = r_network_spec(1, 2, 3, &[4], Activation::Tanh).unwrap();
        let w = spec.init_weights(&mut StreamSplitter::new(4).stream("r"));
        let a = r_params_for(&[1.0], &[0.0, 0.0], &spec, &w).unwrap();
        let b = r_params_for(&[1.0], &[1.0, -1.0], &spec, &w).unwrap();
        assert_ne!(a, b);
        // log-variance head starts at -1 in its biases.
        let (_, br) = spec.layer_ranges(1);
        assert!(w[br.start + 3..br.end].iter().all(|&v| v == -1.0));
    }
}
