//! `generate`: training sets for every requested operation and approach, plus
//! the held-out test set each operation is evaluated on.

use std::collections::BTreeSet;
use std::path::PathBuf;

use placevalue::datagen::{
    exclude_test_pairs, load_test_set, sample_pairs, sample_test_cases, write_dataset,
    write_test_set, SamplingSpec, TestSetFormat,
};
use placevalue::format::{Approach, Operation};

use super::{select, Context};
use crate::error::Usage;
use crate::layout::create_dir;

pub const DEFAULT_TEST_PER_BAND: usize = 200;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Operation: add, sub or mul [default: all three].
    #[arg(long, conflicts_with = "all")]
    pub op: Option<Operation>,
    /// Approach: baseline, spaced or decomposition [default: all three].
    #[arg(long, conflicts_with = "all")]
    pub approach: Option<Approach>,
    /// Every operation and approach: 9 training sets.
    #[arg(long)]
    pub all: bool,
    /// External test set to hold out instead of sampling one.
    #[arg(long)]
    pub test_set: Option<PathBuf>,
    /// Format of --test-set: native or gpt3-jsonl [default: native].
    #[arg(long)]
    pub test_format: Option<TestSetFormat>,
    /// Sampled test cases per digit band [default: 200].
    #[arg(long)]
    pub test_per_band: Option<usize>,
    /// Training bands as `digits:count,...` [default: 4 bands of 3000 for add
    /// and sub, one 2-digit band of 3000 for mul].
    #[arg(long)]
    pub bands: Option<String>,
}

pub fn run(ctx: &mut Context, args: Args) -> anyhow::Result<()> {
    let s = &mut ctx.settings;
    let op = s.get_opt("op", args.op)?;
    let approach = s.get_opt("approach", args.approach)?;
    let test_path = s.get_opt("test_set", args.test_set.map(|p| p.display().to_string()))?;
    let test_format = s.get("test_format", args.test_format, TestSetFormat::Native)?;
    let per_band = s.get("test_per_band", args.test_per_band, DEFAULT_TEST_PER_BAND)?;
    let bands = s.get_opt("bands", args.bands)?;

    let external = match &test_path {
        Some(p) => {
            let set = load_test_set(p.as_ref(), test_format)?;
            for f in &set.flagged {
                log::warn!(
                    "{p}:{}: stated answer {} but the operation gives {}; line excluded",
                    f.line,
                    f.stated,
                    f.oracle
                );
            }
            Some(set.cases)
        }
        None => None,
    };

    let data_dir = ctx.layout.data_dir();
    create_dir(&data_dir)?;
    for op in select(op, &Operation::ALL) {
        let mut spec = SamplingSpec::standard(op, ctx.seed);
        if let Some(b) = &bands {
            spec.bands = SamplingSpec::parse_bands(b).map_err(|e| Usage(e.to_string()))?;
        }
        spec.validate().map_err(|e| Usage(e.to_string()))?;
        let test = match &external {
            Some(cases) => cases.iter().filter(|c| c.op == op).cloned().collect(),
            None => {
                let digits: BTreeSet<u32> = spec.bands.iter().map(|b| b.digits).collect();
                let digits: Vec<u32> = digits.into_iter().collect();
                sample_test_cases(op, &digits, per_band, ctx.seed)?
            }
        };
        let test_file = ctx.layout.test_set(op);
        write_test_set(&test, &test_file)?;
        let pairs = exclude_test_pairs(sample_pairs(&spec)?, &test, &spec)?;
        for approach in select(approach, &Approach::ALL) {
            let path = ctx.layout.dataset(op, approach);
            write_dataset(&pairs, &spec, approach, &path)?;
            log::info!("wrote {} ({} lines)", path.display(), pairs.len());
        }
        log::info!("wrote {} ({} cases)", test_file.display(), test.len());
    }
    let scope = |v: Option<String>| v.unwrap_or_else(|| "all".to_string());
    let name = format!(
        "manifest-{}-{}.txt",
        scope(op.map(|o| o.to_string())),
        scope(approach.map(|a| a.to_string()))
    );
    ctx.settings
        .write_manifest_as(&data_dir.join(name), "generate")
}
