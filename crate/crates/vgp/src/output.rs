//! CSV and JSON artifacts.

use std::io::Write;

use serde::Serialize;
use vgp_core::train::TrainTrace;

pub const TRACE_HEADER: [&str; 7] = [
    "iteration",
    "total",
    "reconstruction",
    "prior_kl",
    "aux_penalty",
    "grad_norm",
    "ms",
];

pub const UNIVERSAL_HEADER: [&str; 4] = ["k", "ks", "n", "seed"];

/// Writes the trace; the header is present even when the trace is empty.
pub fn write_trace<W: Write>(trace: &TrainTrace, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in &trace.records {
        w.write_record([
            r.iteration.to_string(),
            r.total.to_string(),
            r.reconstruction.to_string(),
            r.prior_kl.to_string(),
            r.aux_penalty.to_string(),
            r.grad_norm.to_string(),
            r.ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniversalRow {
    pub k: u32,
    pub ks: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn write_universal<W: Write>(rows: &[UniversalRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(UNIVERSAL_HEADER)?;
    for r in rows {
        w.write_record([r.k.to_string(), r.ks.to_string(), r.n.to_string(), r.seed.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Exact quantities printed by `vgp oracle`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub target: String,
    pub latent_dim: usize,
    pub observation: Vec<f64>,
    /// `log p(x)`, or the log normalizer for targets without observations.
    pub log_evidence: Option<f64>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// `"target"` when the target computes its own moments, otherwise
    /// `"quadrature"` or `"enumeration"`.
    pub moments_method: &'static str,
}
