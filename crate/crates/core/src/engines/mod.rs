//! Decode-step attention strategies.
//!
//! Every engine exists at two levels:
//!
//! * a score-level core that takes one post-softmax score row plus the value
//!   rows it ranges over, used to replay recorded traces;
//! * a `q, k, v` wrapper that owns a [`KvCache`], appends the current token
//!   first and then scores it (the current token attends to itself).
//!
//! Score-level functions read only the first `scores.len()` rows of `values`,
//! so a caller can keep one growing value matrix for a whole replay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::math::{self, Matrix};

pub mod evict;
pub mod sift;

pub use evict::{EvictAttention, EvictConfig, EvictController};
pub use sift::{EmptyFilterPolicy, SiftAttention, SiftConfig, SiftController};

/// Output of one decode step plus what was kept to produce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub output: Vec<f64>,
    /// Ascending positions whose values contributed to `output`.
    pub retained_indices: Vec<usize>,
    /// Positions in the cache at this step (the step index `S`).
    pub total_keys: usize,
    /// Threshold compared against, only set by the approximate sift phase.
    pub threshold_used: Option<f64>,
    /// Nothing passed the threshold and the argmax was kept instead.
    pub fallback_triggered: bool,
}

impl StepResult {
    pub fn retained_count(&self) -> usize {
        self.retained_indices.len()
    }

    fn full(output: Vec<f64>, total_keys: usize) -> Self {
        Self {
            output,
            retained_indices: (0..total_keys).collect(),
            total_keys,
            threshold_used: None,
            fallback_triggered: false,
        }
    }
}

/// `ceil(fraction * n)`, at least 1. A small slack absorbs products like
/// `0.07 * 100 = 7.000000000000001`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n.max(1))
}

pub(crate) fn check_scores(scores: &[f64], values: &Matrix) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidState("no cached positions to attend to".into()));
    }
    if values.rows() < scores.len() {
        return Err(Error::shape(
            format!("at least {} value rows", scores.len()),
            format!("{} rows", values.rows()),
        ));
    }
    Ok(())
}

/// Post-softmax scores of `q` against every cached key.
pub fn attention_scores(cache: &KvCache, q: &[f64]) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(Error::InvalidState("attention over an empty cache".into()));
    }
    let logits = math::scaled_dot_scores(q, cache.keys(), cache.head_dim())?;
    math::softmax(&logits)
}

/// Full attention from a score row.
pub fn exact_from_scores(scores: &[f64], values: &Matrix) -> Result<StepResult> {
    check_scores(scores, values)?;
    let all: Vec<usize> = (0..scores.len()).collect();
    let output = math::weighted_sum_indexed(scores, values, &all);
    Ok(StepResult::full(output, scores.len()))
}

/// Exact attention over the whole cache. The caller appends the current
/// token's key and value before calling. Also returns the score row.
pub fn exact_step(cache: &KvCache, q: &[f64]) -> Result<(StepResult, Vec<f64>)> {
    let scores = attention_scores(cache, q)?;
    let result = exact_from_scores(&scores, cache.values())?;
    Ok((result, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKConfig {
    k_fraction: f64,
}

impl TopKConfig {
    pub fn new(k_fraction: f64) -> Result<Self> {
        if !(k_fraction > 0.0 && k_fraction <= 1.0) {
            return Err(Error::invalid(format!("k fraction {k_fraction} outside (0, 1]")));
        }
        Ok(Self { k_fraction })
    }

    pub fn k_fraction(&self) -> f64 {
        self.k_fraction
    }

    /// Number of keys kept when `total` are cached.
    pub fn k_for(&self, total: usize) -> usize {
        fraction_count(self.k_fraction, total)
    }
}

/// Indices of the `k` largest scores, ascending. Equal scores prefer the lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
        });
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Top-k over a score row. Retained scores are used as-is, not renormalized.
pub fn topk_from_scores(scores: &[f64], values: &Matrix, cfg: &TopKConfig) -> Result<StepResult> {
    check_scores(scores, values)?;
    let retained = select_topk(scores, cfg.k_for(scores.len()));
    let output = math::weighted_sum_indexed(scores, values, &retained);
    Ok(StepResult {
        output,
        retained_indices: retained,
        total_keys: scores.len(),
        threshold_used: None,
        fallback_triggered: false,
    })
}

pub fn topk_step(cache: &KvCache, q: &[f64], cfg: &TopKConfig) -> Result<StepResult> {
    let scores = attention_scores(cache, q)?;
    topk_from_scores(&scores, cache.values(), cfg)
}

/// Engine selection with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum EngineSpec {
    Full,
    TopK(TopKConfig),
    Sift(SiftConfig),
    Evict(EvictConfig),
}

impl EngineSpec {
    /// Fraction of keys the configuration aims to prune.
    pub fn intended_sparsity(&self) -> f64 {
        match self {
            EngineSpec::Full => 0.0,
            EngineSpec::TopK(c) => 1.0 - c.k_fraction(),
            EngineSpec::Sift(c) => c.tau(),
            EngineSpec::Evict(c) => 1.0 - c.budget_fraction(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EngineSpec::Full => "full",
            EngineSpec::TopK(_) => "topk",
            EngineSpec::Sift(_) => "sift",
            EngineSpec::Evict(_) => "evict",
        }
    }

    /// Fresh per-run state for score-level replay.
    pub fn start(&self) -> EngineState {
        match self {
            EngineSpec::Full => EngineState::Full,
            EngineSpec::TopK(c) => EngineState::TopK(*c),
            EngineSpec::Sift(c) => EngineState::Sift(SiftController::new(c.clone())),
            EngineSpec::Evict(c) => EngineState::Evict(EvictController::new(*c)),
        }
    }
}

/// Running state of one engine over one decode sequence.
#[derive(Debug, Clone)]
pub enum EngineState {
    Full,
    TopK(TopKConfig),
    Sift(SiftController),
    Evict(EvictController),
}

impl EngineState {
    /// Advances by one step. `scores` must have one entry per position seen so far.
    pub fn step_scores(&mut self, scores: &[f64], values: &Matrix) -> Result<StepResult> {
        match self {
            EngineState::Full => exact_from_scores(scores, values),
            EngineState::TopK(c) => topk_from_scores(scores, values, c),
            EngineState::Sift(s) => s.step_scores(scores, values),
            EngineState::Evict(e) => e.step_scores(scores, values),
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::kv_cache::KvCache;
    use crate::math::Matrix;

    pub fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    pub fn random_cache(seed: u64, s: usize, d: usize) -> (KvCache, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = KvCache::new(d);
        for _ in 0..s {
            let k = random_vec(&mut rng, d);
            let v = random_vec(&mut rng, d);
            c.append(&k, &v).unwrap();
        }
        let q = random_vec(&mut rng, d);
        (c, q)
    }

    /// Double-loop attention used as an oracle.
    pub fn naive_attention(cache: &KvCache, q: &[f64]) -> Vec<f64> {
        let d = cache.head_dim();
        let s = cache.len();
        let mut logits = vec![0.0; s];
        for i in 0..s {
            for j in 0..d {
                logits[i] += q[j] * cache.keys().row(i)[j];
            }
            logits[i] /= (d as f64).sqrt();
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; d];
        for i in 0..s {
            for j in 0..d {
                out[j] += e[i] / z * cache.values().row(i)[j];
            }
        }
        out
    }

    pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = a.iter().map(|x| x * x).sum();
        (num / den).sqrt()
    }

    pub fn basis_values(n: usize) -> Matrix {
        Matrix::identity(n)
    }
}
