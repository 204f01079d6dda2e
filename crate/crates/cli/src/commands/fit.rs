use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;
use siftlab::metrics::Summary;
use siftlab::powerlaw::{evaluate_warmup_fit_skipping, fit_power_law, r_squared};
use siftlab::{par, AttentionTrace, Error, QuantileSeries, StepRange, TraceHeader};

use super::{to_json, write_file};
use crate::config::{pick, pick_list, FileConfig};
use crate::usage;

pub const SCHEMA: &str = "siftlab-fit/1";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Trace files to fit.
    #[arg(required = true, value_name = "TRACE")]
    traces: Vec<PathBuf>,
    /// Quantile levels [default: 0.5,0.75,0.875]
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// Warmup lengths; a length not shorter than the trace is reported as skipped
    /// [default: 64,128,256,512]
    #[arg(long, value_delimiter = ',')]
    warmups: Vec<usize>,
    /// Leave the first N steps out of every fit and every R² [default: 0]
    #[arg(long, value_name = "N")]
    skip_first: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct TraceEntry {
    path: String,
    header: TraceHeader,
}

#[derive(Debug, Clone, Serialize)]
struct FitEntry {
    trace: usize,
    tau: f64,
    /// `None` for the fit over the whole series.
    warmup: Option<usize>,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    alpha: Option<f64>,
    beta: Option<f64>,
    r2: Option<f64>,
    n_eval: Option<usize>,
    clamped: Option<bool>,
}

#[derive(Debug, Serialize)]
struct SummaryEntry {
    warmup: Option<usize>,
    fitted: usize,
    skipped: usize,
    r2: Option<Summary>,
}

#[derive(Debug, Serialize)]
struct Report {
    schema: &'static str,
    taus: Vec<f64>,
    warmups: Vec<usize>,
    skip_first: usize,
    traces: Vec<TraceEntry>,
    fits: Vec<FitEntry>,
    summary: Vec<SummaryEntry>,
}

impl FitEntry {
    fn skipped(trace: usize, tau: f64, warmup: Option<usize>, reason: String) -> Self {
        Self {
            trace,
            tau,
            warmup,
            status: "skipped",
            reason: Some(reason),
            alpha: None,
            beta: None,
            r2: None,
            n_eval: None,
            clamped: None,
        }
    }
}

fn fit_series(trace: usize, series: &QuantileSeries, warmups: &[usize], skip: usize) -> Vec<FitEntry> {
    let tau = series.tau;
    let n = series.len();
    let mut out = Vec::with_capacity(warmups.len() + 1);

    let full = StepRange::new(skip + 1, n).and_then(|range| {
        let fit = fit_power_law(series, range)?;
        let r2 = match r_squared(series, &fit, range) {
            Ok(q) => Some(q.r2),
            Err(Error::DegenerateVariance) => None,
            Err(e) => return Err(e),
        };
        Ok((fit, r2, range.len()))
    });
    out.push(match full {
        Ok((fit, r2, n_eval)) => FitEntry {
            trace,
            tau,
            warmup: None,
            status: if r2.is_some() { "ok" } else { "constant_series" },
            reason: None,
            alpha: Some(fit.alpha),
            beta: Some(fit.beta),
            r2,
            n_eval: Some(n_eval),
            clamped: Some(fit.clamped),
        },
        Err(e) => FitEntry::skipped(trace, tau, None, e.to_string()),
    });

    for &w in warmups {
        let entry = if w >= n {
            FitEntry::skipped(trace, tau, Some(w), format!("warmup {w} is not shorter than the trace ({n} steps)"))
        } else if w < skip + 2 {
            FitEntry::skipped(trace, tau, Some(w), format!("warmup {w} leaves fewer than 2 points after skipping {skip}"))
        } else {
            match evaluate_warmup_fit_skipping(series, w, skip) {
                Ok(e) => FitEntry {
                    trace,
                    tau,
                    warmup: Some(w),
                    status: "ok",
                    reason: None,
                    alpha: Some(e.fit.alpha),
                    beta: Some(e.fit.beta),
                    r2: Some(e.quality.r2),
                    n_eval: Some(e.quality.n_points),
                    clamped: Some(e.fit.clamped),
                },
                Err(e) => FitEntry::skipped(trace, tau, Some(w), e.to_string()),
            }
        };
        out.push(entry);
    }
    out
}

fn summarize(fits: &[FitEntry], warmups: &[usize]) -> anyhow::Result<Vec<SummaryEntry>> {
    std::iter::once(None)
        .chain(warmups.iter().map(|&w| Some(w)))
        .map(|warmup| {
            let group: Vec<&FitEntry> = fits.iter().filter(|f| f.warmup == warmup).collect();
            let r2: Vec<f64> = group.iter().filter_map(|f| f.r2).collect();
            Ok(SummaryEntry {
                warmup,
                fitted: r2.len(),
                skipped: group.len() - r2.len(),
                r2: if r2.is_empty() { None } else { Some(Summary::of(&r2)?) },
            })
        })
        .collect()
}

pub fn run(args: Args, file: &FileConfig) -> anyhow::Result<()> {
    let taus = pick_list(&args.taus, &file.taus).unwrap_or_else(|| vec![0.5, 0.75, 0.875]);
    let warmups = pick_list(&args.warmups, &file.warmups).unwrap_or_else(|| vec![64, 128, 256, 512]);
    let skip = pick(args.skip_first, &file.skip_first, 0);
    if taus.is_empty() || taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(usage(format!("quantile levels must lie in [0, 1], got {taus:?}")));
    }

    let mut traces: Vec<AttentionTrace> = Vec::with_capacity(args.traces.len());
    for path in &args.traces {
        traces.push(siftlab::read_trace(path).with_context(|| format!("reading trace {}", path.display()))?);
    }

    let jobs: Vec<(usize, f64)> = (0..traces.len())
        .flat_map(|t| taus.iter().map(move |&tau| (t, tau)))
        .collect();
    let per_job = par::map(&jobs, |&(t, tau)| -> anyhow::Result<Vec<FitEntry>> {
        let series = traces[t]
            .quantile_series(tau)
            .with_context(|| format!("trace {}", args.traces[t].display()))?;
        Ok(fit_series(t, &series, &warmups, skip))
    });
    let mut fits = Vec::new();
    for job in per_job {
        fits.extend(job?);
    }

    let report = Report {
        schema: SCHEMA,
        summary: summarize(&fits, &warmups)?,
        taus,
        warmups,
        skip_first: skip,
        traces: args
            .traces
            .iter()
            .zip(&traces)
            .map(|(p, t)| TraceEntry {
                path: p.display().to_string(),
                header: t.header().clone(),
            })
            .collect(),
        fits,
    };
    let json = to_json(&report)?;
    match &args.out {
        Some(path) => write_file(path, &json),
        None => {
            print!("{}", String::from_utf8(json)?);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize) -> QuantileSeries {
        QuantileSeries::new(0.5, (1..=n).map(|i| 3.0 * (i as f64).powf(-0.8)).collect()).unwrap()
    }

    #[test]
    fn exact_series_fits_every_window() {
        let fits = fit_series(0, &series(100), &[10, 50, 100, 200], 0);
        assert_eq!(fits.len(), 5);
        for f in &fits[..3] {
            assert_eq!(f.status, "ok");
            assert!((f.r2.unwrap() - 1.0).abs() < 1e-12);
            assert!((f.beta.unwrap() - 0.8).abs() < 1e-12);
        }
        assert_eq!(fits[3].status, "skipped");
        assert_eq!(fits[4].status, "skipped");
    }

    #[test]
    fn constant_series_has_no_r2() {
        let s = QuantileSeries::new(0.5, vec![0.25; 20]).unwrap();
        let fits = fit_series(0, &s, &[5], 0);
        assert_eq!(fits[0].status, "constant_series");
        assert_eq!(fits[0].beta, Some(0.0));
    }

    #[test]
    fn summary_groups_by_warmup() {
        let mut fits = fit_series(0, &series(100), &[10, 500], 0);
        fits.extend(fit_series(1, &series(60), &[10, 500], 2));
        let s = summarize(&fits, &[10, 500]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!((s[1].fitted, s[1].skipped), (2, 0));
        assert_eq!((s[2].fitted, s[2].skipped), (0, 2));
        assert!(s[2].r2.is_none());
    }
}
