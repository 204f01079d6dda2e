//! Replays a decode sequence through several engines and sweeps synthetic
//! fits over seeds. Independent runs are spread over [`crate::par::map`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engines::{attention_scores, EngineSpec, EngineState};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::math::{self, Matrix};
use crate::metrics::{RunMetrics, StepRecord};
use crate::par;
use crate::powerlaw::{evaluate_warmup_fit_skipping, PowerLawFit};
use crate::synth::{generate_powerlaw_series, SynthParams};
use crate::trace::{AttentionTrace, RecordKind};

/// Score rows for steps `1..=S` together with the value rows they weight.
#[derive(Debug, Clone)]
pub struct DecodeSource {
    rows: Vec<Vec<f64>>,
    values: Matrix,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

impl DecodeSource {
    pub fn new(rows: Vec<Vec<f64>>, values: Matrix) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("decode source has no steps"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::Validation {
                    step: i + 1,
                    message: format!("score row has {} entries", r.len()),
                });
            }
        }
        if values.rows() < rows.len() {
            return Err(Error::shape(
                format!("{} value rows", rows.len()),
                format!("{} rows", values.rows()),
            ));
        }
        Ok(Self { rows, values })
    }

    /// Score rows from a `FULL_SCORES` trace with seeded standard-normal
    /// value vectors of width `head_dim`.
    pub fn from_trace(trace: &AttentionTrace, head_dim: usize, seed: u64) -> Result<Self> {
        if trace.header().record_kind != RecordKind::FullScores {
            return Err(Error::invalid("replay needs a FULL_SCORES trace"));
        }
        let rows = trace
            .records()
            .iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect::<Vec<Vec<f64>>>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Matrix::empty(head_dim);
        for _ in 0..rows.len() {
            values.push_row(&gaussian_vec(&mut rng, head_dim, 1.0))?;
        }
        Self::new(rows, values)
    }

    /// Decode with standard-normal keys and values and queries scaled by
    /// `query_scale`; the current token attends to itself.
    pub fn synthetic_decode(
        steps: usize,
        head_dim: usize,
        query_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if steps == 0 || head_dim == 0 {
            return Err(Error::invalid("synthetic decode needs steps and head_dim > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = KvCache::new(head_dim);
        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            let q = gaussian_vec(&mut rng, head_dim, query_scale);
            let k = gaussian_vec(&mut rng, head_dim, 1.0);
            let v = gaussian_vec(&mut rng, head_dim, 1.0);
            cache.append(&k, &v)?;
            rows.push(attention_scores(&cache, &q)?);
        }
        Self::new(rows, cache.values().clone())
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn head_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.rows[step - 1]
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Exact attention output at every step.
    pub fn exact_outputs(&self) -> Vec<Vec<f64>> {
        let steps: Vec<usize> = (1..=self.steps()).collect();
        par::map(&steps, |&s| {
            let all: Vec<usize> = (0..s).collect();
            math::weighted_sum_indexed(self.row(s), &self.values, &all)
        })
    }
}

/// One engine's pass over a source.
#[derive(Debug, Clone)]
pub struct EngineRun {
    pub spec: EngineSpec,
    pub records: Vec<StepRecord>,
    /// Retained positions per step, kept only when requested.
    pub retained: Option<Vec<Vec<usize>>>,
    pub fit: Option<PowerLawFit>,
}

impl EngineRun {
    /// Aggregates steps `from_step..=S`.
    pub fn metrics(&self, head_dim: usize, bytes_per_element: usize, from_step: usize) -> Result<RunMetrics> {
        let start = from_step.max(1) - 1;
        if start >= self.records.len() {
            return Err(Error::Index {
                index: from_step,
                len: self.records.len(),
            });
        }
        RunMetrics::from_records(
            &self.records[start..],
            self.spec.intended_sparsity(),
            head_dim,
            bytes_per_element,
        )
    }
}

pub fn run_engine(
    source: &DecodeSource,
    spec: &EngineSpec,
    exact: &[Vec<f64>],
    keep_indices: bool,
) -> Result<EngineRun> {
    let mut state = spec.start();
    let mut records = Vec::with_capacity(source.steps());
    let mut retained = keep_indices.then(Vec::new);
    for step in 1..=source.steps() {
        let r = state.step_scores(source.row(step), source.values())?;
        records.push(StepRecord::from_result(step, &r, &exact[step - 1]));
        if let Some(kept) = retained.as_mut() {
            kept.push(r.retained_indices);
        }
    }
    let fit = match &state {
        EngineState::Sift(c) => c.fit().copied(),
        _ => None,
    };
    Ok(EngineRun {
        spec: spec.clone(),
        records,
        retained,
        fit,
    })
}

/// Runs every spec over the same source and exact reference.
pub fn run_all(source: &DecodeSource, specs: &[EngineSpec], keep_indices: bool) -> Result<Vec<EngineRun>> {
    let exact = source.exact_outputs();
    par::map(specs, |spec| run_engine(source, spec, &exact, keep_indices))
        .into_iter()
        .collect()
}

/// Out-of-sample R² of warmup fits on noisy synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSweep {
    pub warmups: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `r2[s][j]` is seed `seeds[s]` with warmup `warmups[j]`.
    pub r2: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl WarmupSweep {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.r2.iter().map(|row| row[j]).collect()
    }
}

pub fn warmup_sweep(
    base: &SynthParams,
    seeds: &[u64],
    warmups: &[usize],
    skip_first: usize,
) -> Result<WarmupSweep> {
    let per_seed = par::map(seeds, |&seed| -> Result<(Vec<f64>, Vec<f64>)> {
        let series = generate_powerlaw_series(&SynthParams {
            seed,
            ..base.clone()
        })?;
        let mut r2 = Vec::with_capacity(warmups.len());
        let mut beta = Vec::with_capacity(warmups.len());
        for &w in warmups {
            let e = evaluate_warmup_fit_skipping(&series, w, skip_first)?;
            r2.push(e.quality.r2);
            beta.push(e.fit.beta);
        }
        Ok((r2, beta))
    });
    let (mut r2, mut beta) = (Vec::new(), Vec::new());
    for row in per_seed {
        let (a, b) = row?;
        r2.push(a);
        beta.push(b);
    }
    Ok(WarmupSweep {
        warmups: warmups.to_vec(),
        seeds: seeds.to_vec(),
        r2,
        beta,
    })
}
