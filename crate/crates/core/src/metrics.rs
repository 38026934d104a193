//! Latency, quality proxies and operation counts.
//!
//! Operation counts follow the kernel counter: a multiply-accumulate is 2
//! operations, and only matrix products and the attention score / weighted
//! sum loops are counted. Embedding lookups, softmax, layer norm, GELU and
//! residual additions cost nothing. The output projection is charged once
//! per emitted token.

use std::fmt::Write as _;

use serde::Serialize;

use crate::engine::{recompute_step_mask, GenerationMode, TranslationTrace};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::model::{ModelConfig, TokenId};

/// Length-adaptive average lagging from per-write source counts `d`.
///
/// `(1/τ) Σ_{i=1..τ} [d_i − (i−1)·|S| / max(|hyp|, |ref|)]`, where `τ` is the
/// first write made after the whole source was read (all writes if none).
pub fn laal_from_delays(d: &[usize], source_len: usize, hyp_len: usize, ref_len: usize) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Input("latency of a trace with no writes".into()));
    }
    if source_len == 0 || hyp_len == 0 || ref_len == 0 {
        return Err(Error::Input("latency needs non-empty lengths".into()));
    }
    let rate = source_len as f64 / hyp_len.max(ref_len) as f64;
    let tau = d
        .iter()
        .position(|&di| di >= source_len)
        .map_or(d.len(), |i| i + 1);
    let sum: f64 = d[..tau]
        .iter()
        .enumerate()
        .map(|(i, &di)| di as f64 - i as f64 * rate)
        .sum();
    Ok(sum / tau as f64)
}

pub fn laal(trace: &TranslationTrace, reference_len: usize) -> Result<f64> {
    laal_from_delays(&trace.d, trace.source_len, trace.d.len(), reference_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityReport {
    /// Reference positions whose token the hypothesis reproduces.
    pub token_accuracy: f64,
    pub exact_match: f64,
}

pub fn quality_proxy(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<QualityReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Input("no references".into()));
    }
    let total: usize = references.iter().map(Vec::len).sum();
    let matched: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    let exact = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(QualityReport {
        token_accuracy: if total == 0 { 1.0 } else { matched as f64 / total as f64 },
        exact_match: exact as f64 / references.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopModel {
    pub config: ModelConfig,
}

impl FlopModel {
    pub fn new(config: ModelConfig) -> Self {
        Self { config }
    }

    /// One position through every layer while attending `n_visible` keys.
    pub fn token_cost(&self, n_visible: usize) -> u64 {
        let c = &self.config;
        let (d, ff) = (c.d_model as u64, c.d_ff() as u64);
        let per_layer = 8 * d * d + 4 * d * ff + 4 * n_visible as u64 * d;
        c.n_layers as u64 * per_layer
    }

    pub fn lm_head_cost(&self) -> u64 {
        2 * (self.config.d_model * self.config.vocab_size) as u64
    }

    /// Every row of `mask` processed once.
    pub fn pass_cost(&self, mask: &AttentionMask) -> u64 {
        (0..mask.rows()).map(|i| self.token_cost(mask.visible_count(i))).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopBreakdown {
    /// Processing each input position once.
    pub initial: u64,
    /// Work spent re-encoding positions that were already processed.
    pub recompute: u64,
    pub total: u64,
}

/// Operation count of the session described by `trace` when run in `mode`.
///
/// The initial share is the cost of a cached session. In recompute mode
/// everything beyond it is charged to the recompute category.
pub fn flops_generate(trace: &TranslationTrace, model: &FlopModel, mode: GenerationMode) -> Result<FlopBreakdown> {
    let writes = trace.d.len();
    if writes == 0 {
        return Err(Error::Input("trace without writes".into()));
    }
    let (pre, mid) = trace.prompt_lens();
    let lm = model.lm_head_cost() * writes as u64;
    let cached = model.pass_cost(&recompute_step_mask(pre, mid, &trace.d)) + lm;
    match mode {
        GenerationMode::Cached => Ok(FlopBreakdown {
            initial: cached,
            recompute: 0,
            total: cached,
        }),
        GenerationMode::Recompute => {
            let total = (1..=writes)
                .map(|u| model.pass_cost(&recompute_step_mask(pre, mid, &trace.d[..u])))
                .sum::<u64>()
                + lm;
            Ok(FlopBreakdown {
                initial: cached,
                recompute: total - cached,
                total,
            })
        }
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Input("need two positive points to fit an exponent".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("all x values equal".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub sentence_id: usize,
    pub k_or_chunk: String,
    pub laal: f64,
    pub flops_initial: u64,
    pub flops_recompute: u64,
    pub token_acc: f64,
    pub exact_match: f64,
}

pub const METRICS_HEADER: &str =
    "sentence_id,k_or_chunk,laal,flops_initial,flops_recompute,token_acc,exact_match";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.sentence_id, r.k_or_chunk, r.laal, r.flops_initial, r.flops_recompute, r.token_acc, r.exact_match
        )
        .unwrap();
    }
    s
}
