//! Run measurements: sparsity, approximation error, modeled value traffic,
//! the runtime cost model and sparsity-mask export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engines::StepResult;
use crate::error::{Error, Result};
use crate::math;

/// Mean over steps of the pruned fraction `(total - retained) / total`.
pub fn realized_sparsity(retained: &[usize], totals: &[usize]) -> Result<f64> {
    check_counts(retained, totals)?;
    let sum: f64 = retained
        .iter()
        .zip(totals)
        .map(|(&r, &t)| (t - r) as f64 / t as f64)
        .sum();
    Ok(sum / retained.len() as f64)
}

/// Pruned keys over total keys, pooled across steps.
pub fn pooled_sparsity(retained: &[usize], totals: &[usize]) -> Result<f64> {
    check_counts(retained, totals)?;
    let r: u64 = retained.iter().map(|&x| x as u64).sum();
    let t: u64 = totals.iter().map(|&x| x as u64).sum();
    Ok((t - r) as f64 / t as f64)
}

fn check_counts(retained: &[usize], totals: &[usize]) -> Result<()> {
    if retained.is_empty() {
        return Err(Error::invalid("no steps to measure"));
    }
    if retained.len() != totals.len() {
        return Err(Error::shape(
            format!("{} totals", retained.len()),
            format!("{} totals", totals.len()),
        ));
    }
    for (i, (&r, &t)) in retained.iter().zip(totals).enumerate() {
        if t == 0 || r > t {
            return Err(Error::invalid(format!(
                "step {}: retained {r} of {t} keys",
                i + 1
            )));
        }
    }
    Ok(())
}

/// `||exact - approx|| / ||exact||` in L2.
pub fn output_error(exact: &[f64], approx: &[f64]) -> Result<f64> {
    if exact.len() != approx.len() {
        return Err(Error::shape(
            format!("length {}", exact.len()),
            format!("length {}", approx.len()),
        ));
    }
    let norm = math::l2_norm(exact);
    if norm == 0.0 {
        return Err(Error::DegenerateInput("exact output has zero norm".into()));
    }
    let diff: f64 = exact
        .iter()
        .zip(approx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

/// Bytes of value vectors read for `retained` positions. Keys are always
/// read in full to compute exact scores, so only values are counted.
pub fn value_bytes_loaded(retained: usize, head_dim: usize, bytes_per_element: usize) -> u64 {
    retained as u64 * head_dim as u64 * bytes_per_element as u64
}

/// Per-step costs for comparing thresholded decoding with top-k decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelInputs {
    /// Score-times-values product over all retained keys (seconds).
    pub t_proj_v: f64,
    /// The same product over the pruned set.
    pub t_proj_v_pruned: f64,
    pub t_threshold: f64,
    pub t_topk: f64,
    /// One-off cost of the power-law fit.
    pub t_powerlaw_fit: f64,
    pub steps: u64,
    pub warmup: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelReport {
    /// `w (t_proj_v - t_proj_v') + (S - w)(t_threshold - t_topk) + t_fit`.
    pub delta: f64,
    /// `(S - w)(t_threshold - t_topk)`, dropping the warmup and fit terms.
    pub approx_delta: f64,
    /// `delta - approx_delta`.
    pub gap: f64,
    /// `w |t_proj_v - t_proj_v'| + t_fit`, which bounds `|gap|`.
    pub gap_bound: f64,
}

/// Runtime difference of thresholded minus top-k decoding over `S` steps.
/// Negative means the thresholded run is predicted faster.
pub fn cost_model_delta(inputs: &CostModelInputs) -> Result<CostModelReport> {
    let durations = [
        inputs.t_proj_v,
        inputs.t_proj_v_pruned,
        inputs.t_threshold,
        inputs.t_topk,
        inputs.t_powerlaw_fit,
    ];
    if durations.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::invalid("durations must be finite and non-negative"));
    }
    if inputs.warmup > inputs.steps {
        return Err(Error::invalid(format!(
            "warmup {} exceeds total steps {}",
            inputs.warmup, inputs.steps
        )));
    }
    let w = inputs.warmup as f64;
    let post = (inputs.steps - inputs.warmup) as f64;
    let proj = inputs.t_proj_v - inputs.t_proj_v_pruned;
    let approx_delta = post * (inputs.t_threshold - inputs.t_topk);
    let delta = w * proj + approx_delta + inputs.t_powerlaw_fit;
    Ok(CostModelReport {
        delta,
        approx_delta,
        gap: delta - approx_delta,
        gap_bound: w * proj.abs() + inputs.t_powerlaw_fit,
    })
}

/// What happened at one decode step, as needed for aggregate metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total_keys: usize,
    pub retained_count: usize,
    pub fallback: bool,
    pub threshold: Option<f64>,
    /// Relative L2 error against exact attention; `None` when the exact
    /// output was the zero vector.
    pub rel_error: Option<f64>,
}

impl StepRecord {
    pub fn from_result(step: usize, result: &StepResult, exact: &[f64]) -> Self {
        Self {
            step,
            total_keys: result.total_keys,
            retained_count: result.retained_count(),
            fallback: result.fallback_triggered,
            threshold: result.threshold_used,
            rel_error: output_error(exact, &result.output).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub retained_counts: Vec<usize>,
    pub total_keys: Vec<usize>,
    pub realized_sparsity: f64,
    pub pooled_sparsity: f64,
    pub intended_sparsity: f64,
    pub mean_rel_l2_error: f64,
    /// Steps skipped in the error mean because the exact output was zero.
    pub error_skipped: usize,
    pub fallback_count: usize,
    pub value_bytes_loaded: u64,
    pub value_bytes_full: u64,
}

impl RunMetrics {
    pub fn from_records(
        records: &[StepRecord],
        intended_sparsity: f64,
        head_dim: usize,
        bytes_per_element: usize,
    ) -> Result<Self> {
        let retained: Vec<usize> = records.iter().map(|r| r.retained_count).collect();
        let totals: Vec<usize> = records.iter().map(|r| r.total_keys).collect();
        let realized = realized_sparsity(&retained, &totals)?;
        let pooled = pooled_sparsity(&retained, &totals)?;
        let errors: Vec<f64> = records.iter().filter_map(|r| r.rel_error).collect();
        let mean_err = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        Ok(Self {
            steps: records.len(),
            realized_sparsity: realized,
            pooled_sparsity: pooled,
            intended_sparsity,
            mean_rel_l2_error: mean_err,
            error_skipped: records.len() - errors.len(),
            fallback_count: records.iter().filter(|r| r.fallback).count(),
            value_bytes_loaded: retained
                .iter()
                .map(|&r| value_bytes_loaded(r, head_dim, bytes_per_element))
                .sum(),
            value_bytes_full: totals
                .iter()
                .map(|&t| value_bytes_loaded(t, head_dim, bytes_per_element))
                .sum(),
            retained_counts: retained,
            total_keys: totals,
        })
    }

    /// `(full - loaded) / full` over the whole run.
    pub fn value_bytes_reduction(&self) -> f64 {
        (self.value_bytes_full - self.value_bytes_loaded) as f64 / self.value_bytes_full as f64
    }
}

/// Order-statistic summary using the same interpolation as [`math::quantile`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p5: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("summary of no values"));
        }
        let mut v = values.to_vec();
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::invalid("summary of NaN values"));
        }
        v.sort_unstable_by(f64::total_cmp);
        let q = |t| math::quantile_sorted(&v, t);
        Ok(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p5: q(0.05),
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            p95: q(0.95),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    /// Comma-separated 0/1, one line per step.
    Csv,
    /// Plain PBM (`P1`), one pixel row per step; 1 is attended.
    Pbm,
}

/// Writes a step-by-position mask. Row `r` is the step `first_step + r`;
/// position `j` is 1 if it was attended at that step. Positions at or past
/// the step (not yet generated) are 0.
pub fn export_sparsity_mask<W: Write>(
    retained: &[Vec<usize>],
    first_step: usize,
    total_steps: usize,
    format: MaskFormat,
    mut out: W,
) -> Result<()> {
    if first_step == 0 {
        return Err(Error::invalid("steps are 1-based"));
    }
    for (r, idx) in retained.iter().enumerate() {
        let step = first_step + r;
        if let Some(&bad) = idx.iter().find(|&&i| i >= step.min(total_steps)) {
            return Err(Error::Index {
                index: bad,
                len: step.min(total_steps),
            });
        }
    }
    if format == MaskFormat::Pbm {
        writeln!(out, "P1")?;
        writeln!(out, "{} {}", total_steps, retained.len())?;
    }
    let sep = if format == MaskFormat::Csv { "," } else { " " };
    let mut line = String::with_capacity(total_steps * 2);
    for idx in retained {
        line.clear();
        let mut next = idx.iter().peekable();
        for j in 0..total_steps {
            if j > 0 {
                line.push_str(sep);
            }
            if next.peek() == Some(&&j) {
                next.next();
                line.push('1');
            } else {
                line.push('0');
            }
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
