//! `eval`: exact-match accuracy of trained models (or a fixture generator) on
//! every digit band of their operation, written as a report table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use placevalue::datagen::{load_test_set, TestCase, TestSetFormat};
use placevalue::eval::{
    evaluate, failures_jsonl, score_tasks, CaseResult, EmptyGenerator, EvalReport, Generator,
    GreedyDecoder, OracleGenerator, ReportFormat, TaskScore, DEFAULT_MAX_NEW_TOKENS,
};
use placevalue::format::{Approach, Operation};
use placevalue::model::{AnyCheckpoint, Model};
use placevalue::remote::first_cases_per_task;
use placevalue::tokenizer::Tokenizer;
use placevalue::{DType, Scalar};

use super::{select, Context};
use crate::layout::{create_dir, require, Layout, CHECKPOINT_FILE, TOKENIZER_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fixture {
    /// Writes the exact reference continuation.
    Oracle,
    /// Writes nothing.
    Empty,
}

impl std::fmt::Display for Fixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fixture::Oracle => "oracle",
            Fixture::Empty => "empty",
        })
    }
}

impl std::str::FromStr for Fixture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Fixture as clap::ValueEnum>::from_str(s, false)
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Operation: add, sub or mul [default: all three].
    #[arg(long, conflicts_with = "matrix")]
    pub op: Option<Operation>,
    /// Approach: baseline, spaced or decomposition [default: all three].
    #[arg(long, conflicts_with = "matrix")]
    pub approach: Option<Approach>,
    /// Every trained operation and approach on all bands of its operation.
    #[arg(long)]
    pub matrix: bool,
    /// Score a fixture generator instead of trained models.
    #[arg(long, value_enum)]
    pub fixture: Option<Fixture>,
    /// External test set instead of the generated one.
    #[arg(long)]
    pub test_set: Option<PathBuf>,
    /// Format of --test-set: native or gpt3-jsonl [default: native].
    #[arg(long)]
    pub test_format: Option<TestSetFormat>,
    /// Only the first N cases of every task [default: all].
    #[arg(long)]
    pub per_task: Option<usize>,
    /// Generation budget in tokens [default: 192].
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

fn scope_name(
    op: Option<Operation>,
    approach: Option<Approach>,
    fixture: Option<Fixture>,
) -> String {
    let mut name = match (op, approach) {
        (None, None) => "matrix".to_string(),
        (op, approach) => format!(
            "{}-{}",
            op.map_or("all".to_string(), |o| o.to_string()),
            approach.map_or("all".to_string(), |a| a.to_string())
        ),
    };
    if let Some(f) = fixture {
        name = format!("{f}-{name}");
    }
    name
}

fn test_cases(
    layout: &Layout,
    external: &Option<Vec<TestCase>>,
    op: Operation,
    per_task: Option<usize>,
) -> anyhow::Result<Vec<TestCase>> {
    let cases = match external {
        Some(all) => all.iter().filter(|c| c.op == op).cloned().collect(),
        None => super::load_op_test_set(layout, op)?,
    };
    Ok(match per_task {
        Some(n) => first_cases_per_task(&cases, n),
        None => cases,
    })
}

fn run_model<S: Scalar>(
    model: &Model<S>,
    tokenizer: &Tokenizer,
    max_new_tokens: usize,
    cases: &[TestCase],
    approach: Approach,
) -> anyhow::Result<Vec<CaseResult>> {
    let mut decoder = GreedyDecoder::new(model, tokenizer);
    decoder.max_new_tokens = max_new_tokens;
    Ok(evaluate(&decoder, cases, approach)?)
}

fn load_and_run(
    dir: &Path,
    op: Operation,
    approach: Approach,
    precision: DType,
    max_new_tokens: usize,
    cases: &[TestCase],
) -> anyhow::Result<Vec<CaseResult>> {
    let ckpt = dir.join(CHECKPOINT_FILE);
    require(
        &ckpt,
        format!("placevalue train --op {op} --approach {approach}"),
    )?;
    let tokenizer = Tokenizer::load(&dir.join(TOKENIZER_FILE))?;
    let checkpoint = AnyCheckpoint::load(&ckpt)?;
    match precision {
        DType::F32 => run_model(
            &checkpoint.into_f32().model,
            &tokenizer,
            max_new_tokens,
            cases,
            approach,
        ),
        DType::F64 => run_model(
            &checkpoint.into_f64().model,
            &tokenizer,
            max_new_tokens,
            cases,
            approach,
        ),
    }
}

pub fn run(ctx: &mut Context, args: Args) -> anyhow::Result<()> {
    let s = &mut ctx.settings;
    let op = s.get_opt("op", args.op)?;
    let approach = s.get_opt("approach", args.approach)?;
    let fixture = s.get_opt("fixture", args.fixture)?;
    let test_path = s.get_opt("test_set", args.test_set.map(|p| p.display().to_string()))?;
    let test_format = s.get("test_format", args.test_format, TestSetFormat::Native)?;
    let per_task = s.get_opt("per_task", args.per_task)?;
    let max_new_tokens = s.get(
        "max_new_tokens",
        args.max_new_tokens,
        DEFAULT_MAX_NEW_TOKENS,
    )?;

    let external = match &test_path {
        Some(p) => Some(load_test_set(p.as_ref(), test_format)?.cases),
        None => None,
    };
    let out_dir = ctx
        .layout
        .eval_dir()
        .join(scope_name(op, approach, fixture));
    create_dir(&out_dir)?;

    let mut report = EvalReport::new();
    let mut counts = String::from("approach,task,correct,evaluated\n");
    for approach in select(approach, &Approach::ALL) {
        for op in select(op, &Operation::ALL) {
            let cases = test_cases(&ctx.layout, &external, op, per_task)?;
            let results = match fixture {
                Some(f) => {
                    let generator: Box<dyn Generator> = match f {
                        Fixture::Oracle => Box::new(OracleGenerator { approach }),
                        Fixture::Empty => Box::new(EmptyGenerator),
                    };
                    evaluate(generator.as_ref(), &cases, approach)?
                }
                None => load_and_run(
                    &ctx.layout.model_dir(op, approach),
                    op,
                    approach,
                    ctx.precision,
                    max_new_tokens,
                    &cases,
                )?,
            };
            let scores = score_tasks(&results);
            report.record(approach.name(), &scores);
            for (task, TaskScore { correct, evaluated }) in &scores {
                let _ = writeln!(counts, "{approach},{task},{correct},{evaluated}");
            }
            let failures = out_dir.join(format!("failures-{op}-{approach}.jsonl"));
            write(&failures, &failures_jsonl(&results))?;
            log::info!(
                "{op}-{approach}: {}/{} correct",
                results.iter().filter(|r| r.correct).count(),
                results.len()
            );
        }
    }
    for format in [ReportFormat::Csv, ReportFormat::Text, ReportFormat::Html] {
        let path = out_dir.join(format!("report.{}", format.extension()));
        write(&path, &report.render(format))?;
    }
    write(&out_dir.join("counts.csv"), &counts)?;
    ctx.settings.write_manifest(&out_dir, "eval")?;
    print!("{}", report.to_text());
    println!("wrote {}", out_dir.display());
    Ok(())
}

pub fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
