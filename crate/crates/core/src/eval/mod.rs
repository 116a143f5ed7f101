//! Greedy generation, exact-match scoring and reporting.
//!
//! A test case counts as correct when the integer at the very end of the
//! generated continuation equals the true result; nothing else about the
//! generation is inspected.

mod report;
mod saliency_report;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::TestCase;
use crate::format::{
    extract_answer, prompt_prefix, render_observation, Approach, FormatError, Operation,
};
use crate::model::ops::argmax;
use crate::model::{forward_cached, KvCache, Model, ModelError};
use crate::scalar::Scalar;
use crate::tokenizer::{Tokenizer, TokenizerError, BOS, EOS};

pub use report::{parse_csv, Cell, EvalReport, ReportFormat, Row, TASK_COLUMNS};
pub use saliency_report::{
    place_digit_probe, saliency_report, teacher_forced_ids, ProbeOutcome, SaliencyPanel,
    SaliencyReport,
};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 192;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("cannot parse operands from prompt `{0}`")]
    Prompt(String),
    #[error("{0}")]
    Report(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A generated continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Text produced after the prompt, up to (not including) the stop token.
    pub continuation: String,
    /// True when generation stopped for lack of budget rather than at a stop token.
    pub truncated: bool,
}

/// Anything that continues a prompt.
pub trait Generator: Sync {
    fn generate(&self, prompt: &str) -> Result<Generation, EvalError>;
}

/// Greedy decoding from a trained model.
pub struct GreedyDecoder<'a, S> {
    pub model: &'a Model<S>,
    pub tokenizer: &'a Tokenizer,
    pub max_new_tokens: usize,
}

impl<'a, S: Scalar> GreedyDecoder<'a, S> {
    pub fn new(model: &'a Model<S>, tokenizer: &'a Tokenizer) -> Self {
        GreedyDecoder {
            model,
            tokenizer,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

impl<S: Scalar> Generator for GreedyDecoder<'_, S> {
    fn generate(&self, prompt: &str) -> Result<Generation, EvalError> {
        greedy_decode(self.model, self.tokenizer, prompt, self.max_new_tokens)
    }
}

/// Appends argmax tokens (ties to the lowest id) until `EOS`, a newline, the
/// token budget or the model's context length is reached.
pub fn greedy_decode<S: Scalar>(
    model: &Model<S>,
    tokenizer: &Tokenizer,
    prompt: &str,
    max_new_tokens: usize,
) -> Result<Generation, EvalError> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer.encode(prompt)?);
    let max_len = model.config().max_seq_len;
    if ids.len() > max_len {
        return Err(ModelError::SequenceTooLong {
            len: ids.len(),
            max: max_len,
        }
        .into());
    }
    let v = model.config().vocab_size;
    let mut cache = KvCache::new(model.config());
    let mut logits = forward_cached(model, &mut cache, &ids)?;
    let mut continuation = String::new();
    for _ in 0..max_new_tokens {
        let last = &logits[logits.len() - v..];
        let next = argmax(last) as u32;
        if next == EOS {
            return Ok(Generation {
                continuation,
                truncated: false,
            });
        }
        let text = tokenizer.decode(&[next])?;
        if let Some(i) = text.find('\n') {
            continuation.push_str(&text[..i]);
            return Ok(Generation {
                continuation,
                truncated: false,
            });
        }
        continuation.push_str(&text);
        if cache.len() == max_len {
            break;
        }
        logits = forward_cached(model, &mut cache, &[next])?;
    }
    Ok(Generation {
        continuation,
        truncated: true,
    })
}

/// Reads `(n1, op, n2)` back out of a prompt built by [`prompt_prefix`].
pub fn parse_prompt(prompt: &str) -> Option<(i64, Operation, i64)> {
    let body = prompt.strip_prefix("Compute ")?;
    let body = body.strip_prefix("with pipeline ").unwrap_or(body);
    let body = body.strip_suffix('.')?;
    let mut words = body.split(' ');
    let n1 = words.next()?.parse().ok()?;
    let op = Operation::from_word(words.next()?)?;
    let n2 = words.next()?.parse().ok()?;
    if words.next().is_some() {
        return None;
    }
    Some((n1, op, n2))
}

/// Test fixture that writes the exact ground-truth continuation.
pub struct OracleGenerator {
    pub approach: Approach,
}

impl Generator for OracleGenerator {
    fn generate(&self, prompt: &str) -> Result<Generation, EvalError> {
        let (n1, op, n2) =
            parse_prompt(prompt).ok_or_else(|| EvalError::Prompt(prompt.to_string()))?;
        let obs = render_observation(n1, n2, op, self.approach)?;
        Ok(Generation {
            continuation: obs.continuation().to_string(),
            truncated: false,
        })
    }
}

/// Test fixture that produces nothing.
pub struct EmptyGenerator;

impl Generator for EmptyGenerator {
    fn generate(&self, _prompt: &str) -> Result<Generation, EvalError> {
        Ok(Generation {
            continuation: String::new(),
            truncated: false,
        })
    }
}

/// Table column for a digit band and operation, e.g. `3D-`.
pub fn task_label(band: u32, op: Operation) -> String {
    format!("{band}D{}", op.task_suffix())
}

/// Outcome of one test case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaseResult {
    pub task: String,
    pub n1: i64,
    pub n2: i64,
    pub prompt: String,
    pub generation: String,
    pub expected: i64,
    pub extracted: Option<i64>,
    pub correct: bool,
    pub truncated: bool,
}

/// Correct and evaluated counts per task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TaskScore {
    pub correct: usize,
    pub evaluated: usize,
}

impl TaskScore {
    pub fn accuracy(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.evaluated as f64
        }
    }
}

pub fn score_tasks(results: &[CaseResult]) -> BTreeMap<String, TaskScore> {
    let mut out: BTreeMap<String, TaskScore> = BTreeMap::new();
    for r in results {
        let s = out.entry(r.task.clone()).or_default();
        s.evaluated += 1;
        s.correct += usize::from(r.correct);
    }
    out
}

/// Scores a single generation with the trailing-number rule.
pub fn score_case(case: &TestCase, prompt: String, generation: Generation) -> CaseResult {
    let extracted = extract_answer(&generation.continuation);
    CaseResult {
        task: task_label(case.band(), case.op),
        n1: case.n1,
        n2: case.n2,
        prompt,
        correct: extracted == Some(case.expected),
        generation: generation.continuation,
        expected: case.expected,
        extracted,
        truncated: generation.truncated,
    }
}

/// Runs every case through `generator` with the prompt of `approach`. Results
/// keep the order of `cases`. Generator failures on a single case count as
/// incorrect answers.
pub fn evaluate(
    generator: &dyn Generator,
    cases: &[TestCase],
    approach: Approach,
) -> Result<Vec<CaseResult>, EvalError> {
    cases
        .par_iter()
        .map(|case| {
            let prompt = prompt_prefix(case.n1, case.n2, case.op, approach)?;
            let generation = generator.generate(&prompt).unwrap_or_else(|e| {
                log::warn!("generation failed for `{prompt}`: {e}");
                Generation {
                    continuation: String::new(),
                    truncated: false,
                }
            });
            Ok(score_case(case, prompt, generation))
        })
        .collect()
}

/// One JSON object per failed case.
pub fn failures_jsonl(results: &[CaseResult]) -> String {
    let mut out = String::new();
    for r in results.iter().filter(|r| !r.correct) {
        out.push_str(&serde_json::to_string(r).expect("plain data serializes"));
        out.push('\n');
    }
    out
}
