use std::path::PathBuf;

use clap::ValueEnum;
use serde::Serialize;
use siftlab::synth::{generate_manifold_trace, generate_quantile_trace, generate_score_trace};
use siftlab::{AttentionTrace, SynthParams, TraceHeader};

use super::{to_json, write_file};
use crate::config::{pick, pick_list, FileConfig};
use crate::usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    /// Per-step quantile values following a noisy power law.
    Quantiles,
    /// Full rows: softmax of Gaussian logits.
    Scores,
    /// Full rows whose tau-quantile follows a noisy power law exactly.
    Manifold,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Output trace file.
    #[arg(long, required = true, value_name = "FILE")]
    out: PathBuf,
    /// What to generate [default: quantiles]
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    /// Number of decode steps [default: 1024]
    #[arg(long)]
    steps: Option<usize>,
    /// Power-law scale [default: 1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Power-law exponent [default: 1]
    #[arg(long)]
    beta: Option<f64>,
    /// Log-normal noise sigma [default: 0]
    #[arg(long)]
    noise: Option<f64>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Logit standard deviation for --kind scores [default: 1]
    #[arg(long)]
    concentration: Option<f64>,
    /// Quantile level pinned by --kind manifold [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Quantile levels stored by --kind quantiles [default: 0.5,0.75,0.875]
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    prompt_id: Option<u64>,
    #[arg(long)]
    layer: Option<u32>,
    #[arg(long)]
    head: Option<u32>,
}

#[derive(Serialize)]
struct Summary<'a> {
    path: String,
    bytes: usize,
    params: &'a SynthParams,
    header: &'a TraceHeader,
}

pub fn run(args: Args, file: &FileConfig) -> anyhow::Result<()> {
    let kind = match (args.kind, &file.kind) {
        (Some(k), _) => k,
        (None, Some(s)) => Kind::from_str(s, true).map_err(|_| usage(format!("unknown trace kind '{s}' in config")))?,
        (None, None) => Kind::Quantiles,
    };
    let defaults = SynthParams::default();
    let params = SynthParams {
        alpha: pick(args.alpha, &file.alpha, defaults.alpha),
        beta: pick(args.beta, &file.beta, defaults.beta),
        noise_sigma: pick(args.noise, &file.noise, defaults.noise_sigma),
        steps: pick(args.steps, &file.steps, defaults.steps),
        seed: pick(args.seed, &file.seed, defaults.seed),
        concentration: pick(args.concentration, &file.concentration, defaults.concentration),
        tau: pick(args.tau, &file.tau, defaults.tau),
    };
    params.validate().map_err(|e| usage(e.to_string()))?;

    let trace = match kind {
        Kind::Quantiles => {
            let levels = pick_list(&args.taus, &file.taus).unwrap_or_else(|| vec![0.5, 0.75, 0.875]);
            if levels.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(usage(format!("quantile levels must lie in [0, 1], got {levels:?}")));
            }
            generate_quantile_trace(&params, &levels)?
        }
        Kind::Scores => generate_score_trace(&params)?,
        Kind::Manifold => generate_manifold_trace(&params)?.trace,
    };

    let mut header = trace.header().clone();
    if let Some(v) = args.model_name {
        header.model_name = v;
    }
    if let Some(v) = args.dataset {
        header.dataset = v;
    }
    header.prompt_id = args.prompt_id.unwrap_or(header.prompt_id);
    header.layer = args.layer.unwrap_or(header.layer);
    header.head = args.head.unwrap_or(header.head);
    let trace = AttentionTrace::new(header, trace.records().to_vec())?;

    let bytes = trace.to_bytes();
    write_file(&args.out, &bytes)?;
    let summary = Summary {
        path: args.out.display().to_string(),
        bytes: bytes.len(),
        params: &params,
        header: trace.header(),
    };
    print!("{}", String::from_utf8(to_json(&summary)?)?);
    Ok(())
}
