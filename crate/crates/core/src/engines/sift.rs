//! Quantile-threshold attention in two phases.
//!
//! During the first `w` steps attention is exact and the `tau`-quantile of
//! each score row is recorded. When step `w` completes, a power law
//! `alpha * S^(-beta)` is fitted to those quantiles. From then on each step
//! keeps only scores strictly above the predicted quantile for its step and
//! loads only their value rows.

use serde::{Deserialize, Serialize};

use super::{attention_scores, check_scores, exact_from_scores, StepResult};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::math::{self, Matrix};
use crate::powerlaw::{fit_power_law, PowerLawFit, QuantileSeries, StepRange};

/// What to do when no score clears the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyFilterPolicy {
    /// Keep the single largest score (lowest index on ties) and flag the step.
    #[default]
    KeepArgmax,
    /// Emit a zero output vector.
    ReturnZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiftConfig {
    tau: f64,
    warmup_steps: usize,
    #[serde(default)]
    pub empty_filter_policy: EmptyFilterPolicy,
    /// Rescale retained scores to sum to one. Off by default.
    #[serde(default)]
    pub renormalize: bool,
    /// Warmup steps left out of the fit (they are still run exactly).
    #[serde(default)]
    skip_first: usize,
    /// Fixed threshold replacing the fitted prediction after warmup.
    #[serde(default)]
    pub threshold_override: Option<f64>,
}

impl SiftConfig {
    pub fn new(tau: f64, warmup_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::invalid(format!("tau {tau} outside [0, 1)")));
        }
        if warmup_steps < 2 {
            return Err(Error::invalid(format!(
                "warmup must be at least 2 steps, got {warmup_steps}"
            )));
        }
        Ok(Self {
            tau,
            warmup_steps,
            empty_filter_policy: EmptyFilterPolicy::default(),
            renormalize: false,
            skip_first: 0,
            threshold_override: None,
        })
    }

    pub fn with_policy(mut self, policy: EmptyFilterPolicy) -> Self {
        self.empty_filter_policy = policy;
        self
    }

    pub fn with_renormalize(mut self, on: bool) -> Self {
        self.renormalize = on;
        self
    }

    pub fn with_threshold_override(mut self, eta: Option<f64>) -> Self {
        self.threshold_override = eta;
        self
    }

    /// Excludes the first `n` warmup steps from the fit. At least two fitted
    /// points must remain.
    pub fn with_skip_first(mut self, n: usize) -> Result<Self> {
        if n + 2 > self.warmup_steps {
            return Err(Error::invalid(format!(
                "skipping {n} of {} warmup steps leaves fewer than 2 to fit",
                self.warmup_steps
            )));
        }
        self.skip_first = n;
        Ok(self)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    pub fn skip_first(&self) -> usize {
        self.skip_first
    }
}

/// Keeps positions whose score is strictly above `eta`.
///
/// Retained scores are not rescaled unless `renormalize` is set.
pub fn threshold_filter(
    scores: &[f64],
    values: &Matrix,
    eta: f64,
    policy: EmptyFilterPolicy,
    renormalize: bool,
) -> Result<StepResult> {
    check_scores(scores, values)?;
    let mut retained: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > eta).collect();
    let mut fallback = false;
    if retained.is_empty() && policy == EmptyFilterPolicy::KeepArgmax {
        let argmax = (0..scores.len())
            .reduce(|best, i| if scores[i] > scores[best] { i } else { best })
            .expect("non-empty scores");
        retained.push(argmax);
        fallback = true;
    }
    let mut output = math::weighted_sum_indexed(scores, values, &retained);
    if renormalize && !retained.is_empty() {
        let mass: f64 = retained.iter().map(|&i| scores[i]).sum();
        if mass > 0.0 {
            output.iter_mut().for_each(|o| *o /= mass);
        }
    }
    Ok(StepResult {
        output,
        retained_indices: retained,
        total_keys: scores.len(),
        threshold_used: Some(eta),
        fallback_triggered: fallback,
    })
}

/// Phase bookkeeping for one head: quantile record, fit and step counter.
///
/// Works on score rows directly; [`SiftAttention`] wraps it with a cache.
#[derive(Debug, Clone)]
pub struct SiftController {
    config: SiftConfig,
    series: QuantileSeries,
    fit: Option<PowerLawFit>,
    step: usize,
}

impl SiftController {
    pub fn new(config: SiftConfig) -> Self {
        let series = QuantileSeries::empty(config.tau);
        Self {
            config,
            series,
            fit: None,
            step: 0,
        }
    }

    pub fn config(&self) -> &SiftConfig {
        &self.config
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn quantile_series(&self) -> &QuantileSeries {
        &self.series
    }

    pub fn fit(&self) -> Option<&PowerLawFit> {
        self.fit.as_ref()
    }

    pub fn in_warmup(&self) -> bool {
        self.step < self.config.warmup_steps
    }

    fn check_row(&self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.step + 1 {
            return Err(Error::shape(
                format!("score row of length {} at step {}", self.step + 1, self.step + 1),
                format!("length {}", scores.len()),
            ));
        }
        Ok(())
    }

    /// Exact step that also records the quantile. Fits automatically once
    /// the last warmup step is recorded.
    pub fn warmup_scores(&mut self, scores: &[f64], values: &Matrix) -> Result<StepResult> {
        if !self.in_warmup() {
            return Err(Error::Phase(format!(
                "warmup step requested at step {} but warmup ended at {}",
                self.step + 1,
                self.config.warmup_steps
            )));
        }
        self.check_row(scores)?;
        let result = exact_from_scores(scores, values)?;
        let theta = math::quantile(scores, self.config.tau)?;
        self.series.push(theta);
        self.step += 1;
        if self.step == self.config.warmup_steps {
            self.finalize_warmup()?;
        }
        Ok(result)
    }

    /// Fits the power law to the recorded warmup quantiles.
    pub fn finalize_warmup(&mut self) -> Result<PowerLawFit> {
        if self.step != self.config.warmup_steps {
            return Err(Error::Phase(format!(
                "warmup can only be finalized at step {}, currently {}",
                self.config.warmup_steps, self.step
            )));
        }
        let window = StepRange::new(self.config.skip_first + 1, self.config.warmup_steps)?;
        let fit = fit_power_law(&self.series, window)?;
        self.fit = Some(fit);
        Ok(fit)
    }

    /// Threshold that will be used at the 1-based `step`.
    pub fn threshold_at(&self, step: usize) -> Result<f64> {
        if let Some(eta) = self.config.threshold_override {
            return Ok(eta);
        }
        let fit = self
            .fit
            .as_ref()
            .ok_or_else(|| Error::Phase("no power-law fit yet; warmup not complete".into()))?;
        fit.predict(step)
    }

    /// Thresholded step using the fitted prediction for the current step.
    pub fn approx_scores(&mut self, scores: &[f64], values: &Matrix) -> Result<StepResult> {
        if self.fit.is_none() {
            return Err(Error::Phase(format!(
                "approximate step requested at step {} before the warmup fit",
                self.step + 1
            )));
        }
        self.check_row(scores)?;
        let eta = self.threshold_at(self.step + 1)?;
        let result = threshold_filter(
            scores,
            values,
            eta,
            self.config.empty_filter_policy,
            self.config.renormalize,
        )?;
        self.step += 1;
        Ok(result)
    }

    /// Runs whichever phase the controller is in.
    pub fn step_scores(&mut self, scores: &[f64], values: &Matrix) -> Result<StepResult> {
        if self.in_warmup() {
            self.warmup_scores(scores, values)
        } else {
            self.approx_scores(scores, values)
        }
    }
}

/// Two-phase engine over its own key/value cache.
#[derive(Debug, Clone)]
pub struct SiftAttention {
    controller: SiftController,
    cache: KvCache,
}

impl SiftAttention {
    pub fn new(config: SiftConfig, head_dim: usize) -> Self {
        Self {
            controller: SiftController::new(config),
            cache: KvCache::new(head_dim),
        }
    }

    pub fn controller(&self) -> &SiftController {
        &self.controller
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn warmup_step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<StepResult> {
        if !self.controller.in_warmup() {
            return Err(Error::Phase(format!(
                "warmup step requested after warmup of {} steps",
                self.controller.config.warmup_steps
            )));
        }
        let scores = self.append_and_score(q, k, v)?;
        self.controller.warmup_scores(&scores, self.cache.values())
    }

    pub fn finalize_warmup(&mut self) -> Result<PowerLawFit> {
        self.controller.finalize_warmup()
    }

    pub fn approx_step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<StepResult> {
        if self.controller.fit.is_none() {
            return Err(Error::Phase("approximate step before the warmup fit".into()));
        }
        let scores = self.append_and_score(q, k, v)?;
        self.controller.approx_scores(&scores, self.cache.values())
    }

    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<StepResult> {
        if self.controller.in_warmup() {
            self.warmup_step(q, k, v)
        } else {
            self.approx_step(q, k, v)
        }
    }

    fn append_and_score(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.cache.head_dim() {
            return Err(Error::shape(
                format!("query of length {}", self.cache.head_dim()),
                format!("length {}", q.len()),
            ));
        }
        self.cache.append(k, v)?;
        attention_scores(&self.cache, q)
    }
}
