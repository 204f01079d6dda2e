//! Heavy-hitter eviction baseline.
//!
//! A simplified stand-in for accumulated-attention eviction: the engine keeps
//! a persistent retained set of `ceil(budget_fraction * S)` positions made of
//! a recency window plus the positions that have received the most attention
//! so far. Evicted positions never come back. Attention is a softmax over
//! the retained keys only, so weights sum to one over the retained set.

use serde::{Deserialize, Serialize};

use super::{check_scores, fraction_count, StepResult};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::math::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvictConfig {
    budget_fraction: f64,
    recent_window_fraction: f64,
}

impl EvictConfig {
    pub fn new(budget_fraction: f64, recent_window_fraction: f64) -> Result<Self> {
        if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "eviction budget fraction {budget_fraction} outside (0, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&recent_window_fraction) {
            return Err(Error::invalid(format!(
                "recent window fraction {recent_window_fraction} outside [0, 1]"
            )));
        }
        if recent_window_fraction > budget_fraction {
            return Err(Error::invalid(format!(
                "recent window {recent_window_fraction} exceeds budget {budget_fraction}"
            )));
        }
        Ok(Self {
            budget_fraction,
            recent_window_fraction,
        })
    }

    pub fn budget_fraction(&self) -> f64 {
        self.budget_fraction
    }

    pub fn recent_window_fraction(&self) -> f64 {
        self.recent_window_fraction
    }

    pub fn budget_for(&self, total: usize) -> usize {
        fraction_count(self.budget_fraction, total)
    }

    pub fn recent_for(&self, total: usize) -> usize {
        if self.recent_window_fraction == 0.0 {
            0
        } else {
            fraction_count(self.recent_window_fraction, total)
        }
    }
}

/// Retained set and accumulated attention for one head.
#[derive(Debug, Clone)]
pub struct EvictController {
    config: EvictConfig,
    retained: Vec<usize>,
    accumulated: Vec<f64>,
    step: usize,
}

impl EvictController {
    pub fn new(config: EvictConfig) -> Self {
        Self {
            config,
            retained: Vec::new(),
            accumulated: Vec::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// Attention received by each position while it was retained.
    pub fn accumulated_scores(&self) -> &[f64] {
        &self.accumulated
    }

    /// Admits the new position and evicts down to the budget for step `S`.
    fn admit(&mut self) -> &[usize] {
        self.step += 1;
        let s = self.step;
        let newest = s - 1;
        self.retained.push(newest);
        self.accumulated.push(0.0);

        let budget = self.config.budget_for(s);
        let recent_start = s - self.config.recent_for(s).min(s);
        while self.retained.len() > budget {
            // the newest position is always protected, as is the recency window
            let victim = self
                .retained
                .iter()
                .enumerate()
                .filter(|&(_, &i)| i < recent_start && i != newest)
                .min_by(|(_, &a), (_, &b)| {
                    self.accumulated[a]
                        .total_cmp(&self.accumulated[b])
                        .then(a.cmp(&b))
                })
                .map(|(pos, _)| pos)
                .expect("budget is at least the protected window");
            self.retained.remove(victim);
        }
        &self.retained
    }

    fn attend(&mut self, weights: &[f64], values: &Matrix) -> StepResult {
        let output = {
            let mut out = vec![0.0; values.cols()];
            for (&i, &w) in self.retained.iter().zip(weights) {
                for (o, &v) in out.iter_mut().zip(values.row(i)) {
                    *o += w * v;
                }
            }
            out
        };
        for (&i, &w) in self.retained.iter().zip(weights) {
            self.accumulated[i] += w;
        }
        StepResult {
            output,
            retained_indices: self.retained.clone(),
            total_keys: self.step,
            threshold_used: None,
            fallback_triggered: false,
        }
    }

    /// Step from a full post-softmax row: the retained entries are rescaled to
    /// sum to one, which equals a softmax over the retained logits. If every
    /// retained score underflowed to zero the weights fall back to uniform.
    pub fn step_scores(&mut self, scores: &[f64], values: &Matrix) -> Result<StepResult> {
        check_scores(scores, values)?;
        if scores.len() != self.step + 1 {
            return Err(Error::shape(
                format!("score row of length {}", self.step + 1),
                format!("length {}", scores.len()),
            ));
        }
        let retained = self.admit();
        let mass: f64 = retained.iter().map(|&i| scores[i]).sum();
        let weights: Vec<f64> = if mass > 0.0 {
            retained.iter().map(|&i| scores[i] / mass).collect()
        } else {
            vec![1.0 / retained.len() as f64; retained.len()]
        };
        Ok(self.attend(&weights, values))
    }

    /// Step from raw logits over every position; only retained ones are used.
    pub fn step_logits(&mut self, logits: &[f64], values: &Matrix) -> Result<StepResult> {
        check_scores(logits, values)?;
        if logits.len() != self.step + 1 {
            return Err(Error::shape(
                format!("logit row of length {}", self.step + 1),
                format!("length {}", logits.len()),
            ));
        }
        let retained = self.admit();
        let kept: Vec<f64> = retained.iter().map(|&i| logits[i]).collect();
        let weights = math::softmax(&kept)?;
        Ok(self.attend(&weights, values))
    }
}

/// Eviction baseline over its own cache. The cache keeps every position;
/// evicted ones are simply never read again.
#[derive(Debug, Clone)]
pub struct EvictAttention {
    controller: EvictController,
    cache: KvCache,
}

impl EvictAttention {
    pub fn new(config: EvictConfig, head_dim: usize) -> Self {
        Self {
            controller: EvictController::new(config),
            cache: KvCache::new(head_dim),
        }
    }

    pub fn controller(&self) -> &EvictController {
        &self.controller
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<StepResult> {
        if q.len() != self.cache.head_dim() {
            return Err(Error::shape(
                format!("query of length {}", self.cache.head_dim()),
                format!("length {}", q.len()),
            ));
        }
        self.cache.append(k, v)?;
        let logits = math::scaled_dot_scores(q, self.cache.keys(), self.cache.head_dim())?;
        self.controller.step_logits(&logits, self.cache.values())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::engines::test_support::*;

    #[test]
    fn config_bounds() {
        assert!(EvictConfig::new(0.0, 0.0).is_err());
        assert!(EvictConfig::new(1.5, 0.0).is_err());
        assert!(EvictConfig::new(0.5, 0.6).is_err());
        assert!(EvictConfig::new(0.5, -0.1).is_err());
        assert!(EvictConfig::new(0.5, 0.5).is_ok());
    }

    #[test]
    fn full_budget_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 8;
        let mut e = EvictAttention::new(EvictConfig::new(1.0, 0.0).unwrap(), d);
        for s in 1..=40 {
            let (q, k, v) = (
                random_vec(&mut rng, d),
                random_vec(&mut rng, d),
                random_vec(&mut rng, d),
            );
            let r = e.step(&q, &k, &v).unwrap();
            assert_eq!(r.retained_count(), s);
            assert!(rel_l2(&naive_attention(e.cache(), &q), &r.output) < 1e-12);
        }
    }

    #[test]
    fn equal_windows_slide() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let cfg = EvictConfig::new(0.25, 0.25).unwrap();
        let mut e = EvictAttention::new(cfg, d);
        for s in 1..=64usize {
            let (q, k, v) = (
                random_vec(&mut rng, d),
                random_vec(&mut rng, d),
                random_vec(&mut rng, d),
            );
            let r = e.step(&q, &k, &v).unwrap();
            let b = cfg.budget_for(s);
            let want: Vec<usize> = (s - b..s).collect();
            assert_eq!(r.retained_indices, want, "step {s}");
        }
    }

    #[test]
    fn retained_size_matches_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        for (budget, recent) in [(0.3, 0.1), (0.5, 0.0), (0.05, 0.01), (0.9, 0.5)] {
            let cfg = EvictConfig::new(budget, recent).unwrap();
            let mut e = EvictAttention::new(cfg, d);
            let mut evicted = std::collections::BTreeSet::new();
            let mut prev: Vec<usize> = Vec::new();
            for s in 1..=200usize {
                let (q, k, v) = (
                    random_vec(&mut rng, d),
                    random_vec(&mut rng, d),
                    random_vec(&mut rng, d),
                );
                let r = e.step(&q, &k, &v).unwrap();
                let want = ((budget * s as f64).ceil() as usize).max(1);
                assert_eq!(r.retained_count(), want, "budget {budget} step {s}");
                for i in &prev {
                    if !r.retained_indices.contains(i) {
                        evicted.insert(*i);
                    }
                }
                assert!(r.retained_indices.iter().all(|i| !evicted.contains(i)));
                assert!(r.retained_indices.contains(&(s - 1)));
                prev = r.retained_indices.clone();
            }
        }
    }

    #[test]
    fn score_replay_matches_logit_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 6;
        let cfg = EvictConfig::new(0.4, 0.1).unwrap();
        let mut by_logits = EvictAttention::new(cfg, d);
        let mut by_scores = EvictController::new(cfg);
        for _ in 0..80 {
            let (q, k, v) = (
                random_vec(&mut rng, d),
                random_vec(&mut rng, d),
                random_vec(&mut rng, d),
            );
            let a = by_logits.step(&q, &k, &v).unwrap();
            let scores = crate::engines::attention_scores(by_logits.cache(), &q).unwrap();
            let b = by_scores.step_scores(&scores, by_logits.cache().values()).unwrap();
            assert_eq!(a.retained_indices, b.retained_indices);
            assert!(rel_l2(&a.output, &b.output) < 1e-12);
        }
    }

    #[test]
    fn heavy_hitter_survives() {
        // position 10 takes most of the attention from the step it appears
        let cfg = EvictConfig::new(0.2, 0.0).unwrap();
        let mut c = EvictController::new(cfg);
        let values = Matrix::zeros(80, 1);
        for s in 1..=80usize {
            let mut row = vec![1.0 / s as f64; s];
            if s > 10 {
                row.iter_mut().for_each(|x| *x = 0.1 / (s - 1) as f64);
                row[10] = 0.9;
            }
            let r = c.step_scores(&row, &values).unwrap();
            if s > 10 {
                assert!(r.retained_indices.contains(&10), "step {s}");
            }
        }
    }
}
