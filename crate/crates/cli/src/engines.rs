//! Engine flags and their expansion into a sweep of configurations.

use clap::ValueEnum;
use siftlab::{EmptyFilterPolicy, EngineSpec, EvictConfig, SiftConfig, TopKConfig};

use crate::config::{pick, pick_list, pick_opt, FileConfig};
use crate::usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineKind {
    Full,
    Topk,
    Sift,
    Evict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    /// Keep the single highest-scoring key.
    KeepArgmax,
    /// Emit a zero output vector.
    ReturnZero,
}

impl From<Policy> for EmptyFilterPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::KeepArgmax => EmptyFilterPolicy::KeepArgmax,
            Policy::ReturnZero => EmptyFilterPolicy::ReturnZero,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct EngineArgs {
    /// Engines to run.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub engines: Vec<EngineKind>,
    /// Quantile levels for sift.
    #[arg(long, value_delimiter = ',')]
    pub taus: Vec<f64>,
    /// Warmup lengths for sift.
    #[arg(long, value_delimiter = ',')]
    pub warmups: Vec<usize>,
    /// Kept fractions for top-k.
    #[arg(long, value_delimiter = ',')]
    pub k_fractions: Vec<f64>,
    /// Cache budget fractions for evict.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<f64>,
    /// Recent-window fraction for evict [default: 0]
    #[arg(long)]
    pub recent: Option<f64>,
    /// What sift does when no score passes the threshold [default: keep-argmax]
    #[arg(long, value_enum)]
    pub policy: Option<Policy>,
    /// Rescale retained sift weights to sum to one.
    #[arg(long)]
    pub renormalize: bool,
    /// Use this fixed threshold after warmup instead of the fitted one.
    #[arg(long, value_name = "ETA")]
    pub sift_threshold: Option<f64>,
    /// Leave the first N warmup steps out of the sift fit [default: 0]
    #[arg(long, value_name = "N")]
    pub skip_first: Option<usize>,
}

fn parse_engines(names: &[String]) -> anyhow::Result<Vec<EngineKind>> {
    names
        .iter()
        .map(|n| EngineKind::from_str(n, true).map_err(|_| usage(format!("unknown engine '{n}' in config"))))
        .collect()
}

fn required<T: Clone>(list: Option<Vec<T>>, flag: &str, engine: &str) -> anyhow::Result<Vec<T>> {
    match list {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(usage(format!("engine {engine} needs --{flag}"))),
    }
}

/// Cartesian product of the sweep lists for each requested engine, in the
/// order the engines were listed.
pub fn build_specs(args: &EngineArgs, file: &FileConfig) -> anyhow::Result<Vec<EngineSpec>> {
    let engines = if !args.engines.is_empty() {
        args.engines.clone()
    } else if let Some(names) = &file.engines {
        parse_engines(names)?
    } else {
        Vec::new()
    };
    if engines.is_empty() {
        return Err(usage("no engines selected; pass --engines"));
    }
    let policy = match (args.policy, &file.policy) {
        (Some(p), _) => p,
        (None, Some(s)) => Policy::from_str(s, true).map_err(|_| usage(format!("unknown policy '{s}' in config")))?,
        (None, None) => Policy::KeepArgmax,
    };
    let renormalize = args.renormalize || file.renormalize.unwrap_or(false);
    let threshold = pick_opt(args.sift_threshold, &file.sift_threshold);
    let skip_first = pick(args.skip_first, &file.skip_first, 0);
    let recent = pick(args.recent, &file.recent, 0.0);

    let mut specs = Vec::new();
    let mut seen = Vec::new();
    for kind in engines {
        if seen.contains(&kind) {
            continue;
        }
        seen.push(kind);
        match kind {
            EngineKind::Full => specs.push(EngineSpec::Full),
            EngineKind::Topk => {
                for f in required(pick_list(&args.k_fractions, &file.k_fractions), "k-fractions", "topk")? {
                    let cfg = TopKConfig::new(f).map_err(|e| usage(e.to_string()))?;
                    specs.push(EngineSpec::TopK(cfg));
                }
            }
            EngineKind::Sift => {
                let taus = required(pick_list(&args.taus, &file.taus), "taus", "sift")?;
                let warmups = required(pick_list(&args.warmups, &file.warmups), "warmups", "sift")?;
                for &tau in &taus {
                    for &w in &warmups {
                        let cfg = SiftConfig::new(tau, w)
                            .and_then(|c| c.with_skip_first(skip_first))
                            .map_err(|e| usage(e.to_string()))?
                            .with_policy(policy.into())
                            .with_renormalize(renormalize)
                            .with_threshold_override(threshold);
                        specs.push(EngineSpec::Sift(cfg));
                    }
                }
            }
            EngineKind::Evict => {
                for b in required(pick_list(&args.budgets, &file.budgets), "budgets", "evict")? {
                    let cfg = EvictConfig::new(b, recent).map_err(|e| usage(e.to_string()))?;
                    specs.push(EngineSpec::Evict(cfg));
                }
            }
        }
    }
    Ok(specs)
}
