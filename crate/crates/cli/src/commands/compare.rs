use std::path::PathBuf;

use serde::Serialize;
use siftlab::experiment::{run_all, EngineRun};
use siftlab::metrics::RunMetrics;
use siftlab::{EmptyFilterPolicy, EngineSpec, PowerLawFit};

use super::{to_json, write_file};
use crate::config::{pick, FileConfig};
use crate::engines::{build_specs, EngineArgs};
use crate::source::{self, SourceArgs, SourceInfo};
use crate::usage;

pub const CSV_MARKER: &str = "# siftlab-compare v1";
pub const SCHEMA: &str = "siftlab-compare/1";

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    engines: EngineArgs,
    /// First step included in the metrics, e.g. warmup + 1 [default: 1]
    #[arg(long, value_name = "STEP")]
    from_step: Option<usize>,
    /// Bytes per value element in the data-movement model [default: 2]
    #[arg(long)]
    bytes_per_element: Option<usize>,
    /// Output directory [default: $SIFTLAB_OUT_DIR or .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

/// One engine configuration and what it measured.
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub engine: &'static str,
    pub tau: Option<f64>,
    pub warmup: Option<usize>,
    pub k_fraction: Option<f64>,
    pub budget_fraction: Option<f64>,
    pub recent_fraction: Option<f64>,
    pub policy: Option<&'static str>,
    pub renormalize: Option<bool>,
    pub sift_threshold: Option<f64>,
    pub skip_first: Option<usize>,
    pub intended_sparsity: f64,
    pub realized_sparsity: f64,
    pub pooled_sparsity: f64,
    pub mean_rel_l2_error: f64,
    pub error_skipped: usize,
    pub fallback_count: usize,
    pub value_bytes_loaded: u64,
    pub value_bytes_full: u64,
    pub value_bytes_reduction: f64,
    pub from_step: usize,
    pub steps: usize,
    pub fit_alpha: Option<f64>,
    pub fit_beta: Option<f64>,
}

impl Row {
    pub fn new(spec: &EngineSpec, m: &RunMetrics, fit: Option<&PowerLawFit>, from_step: usize) -> Self {
        let mut row = Row {
            engine: spec.name(),
            tau: None,
            warmup: None,
            k_fraction: None,
            budget_fraction: None,
            recent_fraction: None,
            policy: None,
            renormalize: None,
            sift_threshold: None,
            skip_first: None,
            intended_sparsity: m.intended_sparsity,
            realized_sparsity: m.realized_sparsity,
            pooled_sparsity: m.pooled_sparsity,
            mean_rel_l2_error: m.mean_rel_l2_error,
            error_skipped: m.error_skipped,
            fallback_count: m.fallback_count,
            value_bytes_loaded: m.value_bytes_loaded,
            value_bytes_full: m.value_bytes_full,
            value_bytes_reduction: m.value_bytes_reduction(),
            from_step,
            steps: m.steps,
            fit_alpha: fit.map(|f| f.alpha),
            fit_beta: fit.map(|f| f.beta),
        };
        match spec {
            EngineSpec::Full => {}
            EngineSpec::TopK(c) => row.k_fraction = Some(c.k_fraction()),
            EngineSpec::Sift(c) => {
                row.tau = Some(c.tau());
                row.warmup = Some(c.warmup_steps());
                row.policy = Some(match c.empty_filter_policy {
                    EmptyFilterPolicy::KeepArgmax => "keep-argmax",
                    EmptyFilterPolicy::ReturnZero => "return-zero",
                });
                row.renormalize = Some(c.renormalize);
                row.sift_threshold = c.threshold_override;
                row.skip_first = Some(c.skip_first());
            }
            EngineSpec::Evict(c) => {
                row.budget_fraction = Some(c.budget_fraction());
                row.recent_fraction = Some(c.recent_window_fraction());
            }
        }
        row
    }
}

#[derive(Serialize)]
struct Report<'a> {
    schema: &'static str,
    source: &'a SourceInfo,
    from_step: usize,
    bytes_per_element: usize,
    parallel: bool,
    rows: Vec<RunEntry<'a>>,
}

#[derive(Serialize)]
struct RunEntry<'a> {
    config: &'a EngineSpec,
    #[serde(flatten)]
    row: &'a Row,
}

/// CSV text: the marker line, a header, then one line per row.
pub fn to_csv(rows: &[Row]) -> anyhow::Result<Vec<u8>> {
    let mut out = format!("{CSV_MARKER}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(out)
}

pub fn measure(runs: &[EngineRun], head_dim: usize, bpe: usize, from_step: usize) -> anyhow::Result<Vec<Row>> {
    runs.iter()
        .map(|run| {
            let m = run.metrics(head_dim, bpe, from_step)?;
            Ok(Row::new(&run.spec, &m, run.fit.as_ref(), from_step))
        })
        .collect()
}

pub fn run(args: Args, file: &FileConfig) -> anyhow::Result<()> {
    let specs = build_specs(&args.engines, file)?;
    let from_step = pick(args.from_step, &file.from_step, 1);
    let bpe = pick(args.bytes_per_element, &file.bytes_per_element, 2);
    if from_step == 0 {
        return Err(usage("--from-step is 1-based"));
    }
    if bpe == 0 {
        return Err(usage("--bytes-per-element must be positive"));
    }
    let out_dir = file.out_dir(args.out_dir.as_ref());
    let (source, info) = source::load(&args.source, file)?;

    let runs = run_all(&source, &specs, false)?;
    let rows = measure(&runs, info.head_dim, bpe, from_step)?;

    write_file(&out_dir.join("compare.csv"), &to_csv(&rows)?)?;
    let report = Report {
        schema: SCHEMA,
        source: &info,
        from_step,
        bytes_per_element: bpe,
        parallel: siftlab::par::is_parallel(),
        rows: runs
            .iter()
            .zip(&rows)
            .map(|(run, row)| RunEntry { config: &run.spec, row })
            .collect(),
    };
    write_file(&out_dir.join("compare.json"), &to_json(&report)?)?;

    println!(
        "{:<6} {:>6} {:>6} {:>8} {:>8} {:>9} {:>9} {:>10} {:>8}",
        "engine", "tau", "warmup", "k_frac", "budget", "intended", "realized", "rel_l2", "fallback"
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
    for r in &rows {
        println!(
            "{:<6} {:>6} {:>6} {:>8} {:>8} {:>9.4} {:>9.4} {:>10.3e} {:>8}",
            r.engine,
            opt(r.tau),
            r.warmup.map_or("-".to_string(), |w| w.to_string()),
            opt(r.k_fraction),
            opt(r.budget_fraction),
            r.intended_sparsity,
            r.realized_sparsity,
            r.mean_rel_l2_error,
            r.fallback_count
        );
    }
    println!("wrote {}", out_dir.join("compare.csv").display());
    println!("wrote {}", out_dir.join("compare.json").display());
    Ok(())
}
