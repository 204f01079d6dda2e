//! Where `compare` and `mask` get their decode sequence from.

use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;
use siftlab::experiment::DecodeSource;

use crate::config::{pick, FileConfig};
use crate::usage;

#[derive(Debug, Clone, clap::Args)]
pub struct SourceArgs {
    /// FULL_SCORES trace to replay.
    #[arg(long, value_name = "FILE", conflicts_with = "synthetic")]
    pub trace: Option<PathBuf>,
    /// Generate a random-projection decode instead of reading a trace.
    #[arg(long)]
    pub synthetic: bool,
    /// Decode length for --synthetic.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Width of the value vectors.
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Query scale for --synthetic; larger values give peakier attention.
    #[arg(long)]
    pub query_scale: Option<f64>,
    /// Seed for synthetic decodes and for the value vectors of a trace.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// What the source was, for reports.
#[derive(Debug, Clone, Serialize)]
pub struct SourceInfo {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub steps: usize,
    pub head_dim: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_scale: Option<f64>,
}

pub fn load(args: &SourceArgs, file: &FileConfig) -> anyhow::Result<(DecodeSource, SourceInfo)> {
    let head_dim = pick(args.head_dim, &file.head_dim, 64);
    let seed = pick(args.seed, &file.seed, 0);
    if head_dim == 0 {
        return Err(usage("--head-dim must be positive"));
    }
    match (&args.trace, args.synthetic) {
        (Some(path), _) => {
            let trace = siftlab::read_trace(path)
                .with_context(|| format!("reading trace {}", path.display()))?;
            let source = DecodeSource::from_trace(&trace, head_dim, seed)
                .with_context(|| format!("replaying {}", path.display()))?;
            let info = SourceInfo {
                kind: "trace",
                path: Some(path.display().to_string()),
                steps: source.steps(),
                head_dim,
                seed,
                query_scale: None,
            };
            Ok((source, info))
        }
        (None, true) => {
            let steps = pick(args.steps, &file.steps, 1024);
            let query_scale = pick(args.query_scale, &file.query_scale, 1.0);
            if steps == 0 {
                return Err(usage("--steps must be positive"));
            }
            let source = DecodeSource::synthetic_decode(steps, head_dim, query_scale, seed)?;
            let info = SourceInfo {
                kind: "synthetic",
                path: None,
                steps,
                head_dim,
                seed,
                query_scale: Some(query_scale),
            };
            Ok((source, info))
        }
        (None, false) => Err(usage("pass --trace FILE or --synthetic")),
    }
}
