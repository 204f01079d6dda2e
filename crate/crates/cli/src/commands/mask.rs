use std::path::PathBuf;

use clap::ValueEnum;
use siftlab::experiment::run_all;
use siftlab::metrics::{export_sparsity_mask, MaskFormat};
use siftlab::Error;

use super::write_file;
use crate::config::FileConfig;
use crate::engines::{build_specs, EngineArgs};
use crate::source::{self, SourceArgs};
use crate::usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Pbm,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    source: SourceArgs,
    /// Exactly one engine configuration.
    #[command(flatten)]
    engine: EngineArgs,
    /// Export only this 1-based step instead of every step.
    #[arg(long)]
    step: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file [default: <out-dir>/mask.<format>]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Output directory when --out is not given [default: $SIFTLAB_OUT_DIR or .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

pub fn run(args: Args, file: &FileConfig) -> anyhow::Result<()> {
    let specs = build_specs(&args.engine, file)?;
    if specs.len() != 1 {
        return Err(usage(format!(
            "mask takes one engine configuration, the flags describe {}",
            specs.len()
        )));
    }
    if args.step == Some(0) {
        return Err(usage("--step is 1-based"));
    }
    let (source, _) = source::load(&args.source, file)?;
    let total = source.steps();
    if let Some(step) = args.step {
        if step > total {
            return Err(Error::Index { index: step, len: total }.into());
        }
    }

    let run = run_all(&source, &specs, true)?.remove(0);
    let retained = run.retained.expect("indices were requested");
    let (rows, first) = match args.step {
        Some(s) => (&retained[s - 1..s], s),
        None => (&retained[..], 1),
    };
    let (format, ext) = match args.format {
        Format::Csv => (MaskFormat::Csv, "csv"),
        Format::Pbm => (MaskFormat::Pbm, "pbm"),
    };
    let mut buf = Vec::new();
    export_sparsity_mask(rows, first, total, format, &mut buf)?;
    let path = args
        .out
        .unwrap_or_else(|| file.out_dir(args.out_dir.as_ref()).join(format!("mask.{ext}")));
    write_file(&path, &buf)?;
    let ones: usize = rows.iter().map(|r| r.len()).sum();
    println!("wrote {} ({} rows, {ones} attended positions)", path.display(), rows.len());
    Ok(())
}
