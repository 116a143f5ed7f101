//! `report`: renders a report CSV in another format, or the per-cell
//! difference between two of them.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use placevalue::eval::{parse_csv, EvalReport, ReportFormat};

use super::eval::write;
use super::Context;
use crate::error::Usage;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Report CSV to render.
    #[arg(conflicts_with = "compare")]
    pub input: Option<PathBuf>,
    /// Two report CSVs; prints the second minus the first for every shared row.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare: Option<Vec<PathBuf>>,
    /// text, csv or html [default: text].
    #[arg(long)]
    pub format: Option<ReportFormat>,
    /// Write to this file instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn load(path: &Path) -> anyhow::Result<EvalReport> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_csv(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
}

pub fn run(ctx: &mut Context, args: Args) -> anyhow::Result<()> {
    let format = ctx
        .settings
        .get("format", args.format, ReportFormat::Text)?;
    let report = match (&args.input, &args.compare) {
        (Some(p), None) => load(p)?,
        (None, Some(pair)) => load(&pair[0])?.compare(&load(&pair[1])?),
        _ => return Err(Usage("report needs an input CSV or --compare A B".into()).into()),
    };
    let text = report.render(format);
    match &args.output {
        Some(path) => write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
