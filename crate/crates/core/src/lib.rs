//! Quantile-threshold sparse attention for autoregressive decoding.
//!
//! The crate simulates single-head decode steps under several attention
//! strategies and measures them:
//!
//! * [`engines`]: exact attention, top-k, a two-phase quantile-threshold
//!   engine (exact warmup that records score quantiles, then power-law
//!   predicted thresholds) and a heavy-hitter eviction baseline;
//! * [`powerlaw`]: closed-form log-log fits of quantile series and their R²;
//! * [`synth`] and [`trace`]: seeded synthetic inputs and the binary trace format;
//! * [`metrics`]: sparsity, output error, modeled value-load bytes, the
//!   runtime cost model and sparsity masks;
//! * [`experiment`]: replay and sweep drivers, parallel over runs.

pub mod engines;
pub mod error;
pub mod experiment;
pub mod kv_cache;
pub mod math;
pub mod metrics;
pub mod par;
pub mod powerlaw;
pub mod synth;
pub mod trace;

pub use engines::{
    exact_step, topk_step, EmptyFilterPolicy, EngineSpec, EvictConfig, SiftAttention, SiftConfig,
    StepResult, TopKConfig,
};
pub use error::{Error, Result};
pub use kv_cache::KvCache;
pub use math::Matrix;
pub use powerlaw::{FitQuality, PowerLawFit, QuantileSeries, StepRange};
pub use synth::SynthParams;
pub use trace::{read_trace, write_trace, AttentionTrace, RecordKind, TraceHeader};
