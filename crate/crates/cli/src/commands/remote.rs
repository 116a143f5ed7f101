//! `remote`: few-shot prompts against a completion endpoint, or offline
//! re-scoring of a saved transcript.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context as _;
use placevalue::datagen::{load_test_set, TestSetFormat};
use placevalue::eval::{EvalReport, ReportFormat};
use placevalue::format::Operation;
use placevalue::remote::{
    replay_transcript, run_remote_eval, score_entries, skipped_count, HttpClient, PromptStyle,
    RemoteConfig, TranscriptEntry, DEFAULT_RESPONSE_PATH, DEFAULT_TOKEN_ENV,
};

use super::eval::write;
use super::{select, Context};
use crate::error::{RemoteFailure, Usage};
use crate::layout::{create_dir, require};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Completion endpoint URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// plain-fewshot or decomposition-fewshot [default: decomposition-fewshot].
    #[arg(long)]
    pub style: Option<PromptStyle>,
    /// Operation: add, sub or mul [default: all three].
    #[arg(long)]
    pub op: Option<Operation>,
    /// Value of the `model` field in each request [default: omitted].
    #[arg(long)]
    pub model: Option<String>,
    /// Sampling temperature [default: 0.7].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Completion length limit [default: 256].
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Cases sent per task, taken from the start of the test set [default: 100].
    #[arg(long)]
    pub max_cases: Option<usize>,
    /// Per-request timeout in seconds [default: 60].
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Extra attempts after a failed request [default: 3].
    #[arg(long)]
    pub retries: Option<usize>,
    /// Minimum milliseconds between request starts [default: 0].
    #[arg(long)]
    pub min_delay_ms: Option<u64>,
    /// Concurrent requests [default: 1].
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Dotted path of the completion text in the response [default: choices.0.text].
    #[arg(long)]
    pub response_path: Option<String>,
    /// Environment variable holding the bearer token [default: PLACEVALUE_API_KEY].
    #[arg(long)]
    pub token_env: Option<String>,
    /// Send no authorization header.
    #[arg(long)]
    pub no_auth: bool,
    /// External test set instead of the generated one.
    #[arg(long)]
    pub test_set: Option<PathBuf>,
    /// Format of --test-set: native or gpt3-jsonl [default: native].
    #[arg(long)]
    pub test_format: Option<TestSetFormat>,
    /// Re-score this transcript offline instead of sending requests.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

pub fn run(ctx: &mut Context, args: Args) -> anyhow::Result<()> {
    let s = &mut ctx.settings;
    let style = s.get("style", args.style, PromptStyle::DecompositionFewshot)?;
    let response_path = s.get(
        "response_path",
        args.response_path,
        DEFAULT_RESPONSE_PATH.to_string(),
    )?;
    if let Some(path) = &args.replay {
        return replay(ctx, path, &response_path);
    }
    let s = &mut ctx.settings;
    let endpoint = s
        .get_opt("endpoint", args.endpoint)?
        .ok_or_else(|| Usage("remote needs --endpoint (or --replay)".into()))?;
    let op = s.get_opt("op", args.op)?;
    let no_auth = s.get_flag("no_auth", args.no_auth)?;
    let token_env = s.get("token_env", args.token_env, DEFAULT_TOKEN_ENV.to_string())?;
    let defaults = RemoteConfig::new(endpoint.clone(), style);
    let cfg = RemoteConfig {
        token_env: (!no_auth).then_some(token_env),
        model: s.get_opt("model", args.model)?,
        temperature: s.get("temperature", args.temperature, defaults.temperature)?,
        max_tokens: s.get("max_tokens", args.max_tokens, defaults.max_tokens)?,
        max_cases: s.get("max_cases", args.max_cases, defaults.max_cases)?,
        timeout: Duration::from_secs(s.get(
            "timeout_secs",
            args.timeout_secs,
            defaults.timeout.as_secs(),
        )?),
        retries: s.get("retries", args.retries, defaults.retries)?,
        min_delay: Duration::from_millis(s.get("min_delay_ms", args.min_delay_ms, 0)?),
        parallelism: s.get("parallelism", args.parallelism, defaults.parallelism)?,
        response_path,
        ..defaults
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let test_path = s.get_opt("test_set", args.test_set.map(|p| p.display().to_string()))?;
    let test_format = s.get("test_format", args.test_format, TestSetFormat::Native)?;

    let mut cases = Vec::new();
    match &test_path {
        Some(p) => {
            let all = load_test_set(p.as_ref(), test_format)?.cases;
            cases.extend(all.into_iter().filter(|c| op.is_none_or(|o| c.op == o)));
        }
        None => {
            for op in select(op, &Operation::ALL) {
                cases.extend(super::load_op_test_set(&ctx.layout, op)?);
            }
        }
    }

    let client = HttpClient::new(&cfg)?;
    let scope = op.map_or("all".to_string(), |o| o.to_string());
    let out_dir = ctx.layout.remote_dir().join(format!("{style}-{scope}"));
    create_dir(&out_dir)?;
    let transcript_path = out_dir.join("transcript.jsonl");
    let file = File::create(&transcript_path)
        .with_context(|| format!("creating {}", transcript_path.display()))?;
    let mut transcript = BufWriter::new(file);
    let entries = run_remote_eval(&client, &cfg, &cases, &mut transcript)?;
    drop(transcript);
    ctx.settings.write_manifest(&out_dir, "remote")?;
    write_reports(&out_dir, style, &entries)?;

    let skipped = skipped_count(&entries);
    if skipped > 0 {
        eprintln!(
            "warning: {skipped} of {} cases got no usable response and are left out of the accuracy; see {}",
            entries.len(),
            transcript_path.display()
        );
    }
    if skipped == entries.len() && !entries.is_empty() {
        return Err(RemoteFailure(format!("no case was answered by {endpoint}")).into());
    }
    Ok(())
}

fn replay(ctx: &mut Context, path: &PathBuf, response_path: &str) -> anyhow::Result<()> {
    require(path, "placevalue remote --endpoint URL")?;
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries = replay_transcript(&text, response_path)?;
    let style = entries
        .first()
        .map_or(PromptStyle::DecompositionFewshot, |e| e.style);
    let out_dir = ctx.layout.remote_dir().join("replay");
    create_dir(&out_dir)?;
    ctx.settings.record("replay", path.display());
    ctx.settings.write_manifest(&out_dir, "remote")?;
    write_reports(&out_dir, style, &entries)
}

fn write_reports(
    out_dir: &std::path::Path,
    style: PromptStyle,
    entries: &[TranscriptEntry],
) -> anyhow::Result<()> {
    let scores = score_entries(entries);
    let mut report = EvalReport::new();
    report.record(style.name(), &scores);
    for format in [ReportFormat::Csv, ReportFormat::Text, ReportFormat::Html] {
        write(
            &out_dir.join(format!("report.{}", format.extension())),
            &report.render(format),
        )?;
    }
    let mut counts = String::from("style,task,correct,evaluated,skipped\n");
    for (task, score) in &scores {
        let skipped = entries
            .iter()
            .filter(|e| &e.task == task && e.verdict == placevalue::remote::Verdict::Skipped)
            .count();
        let _ = writeln!(
            counts,
            "{style},{task},{},{},{skipped}",
            score.correct, score.evaluated
        );
    }
    write(&out_dir.join("counts.csv"), &counts)?;
    print!("{}", report.to_text());
    println!("wrote {}", out_dir.display());
    Ok(())
}
