//! Few-shot evaluation against a remote text-completion endpoint.
//!
//! Each request is an HTTP POST with a JSON body
//! `{"prompt": ..., "temperature": ..., "max_tokens": ..., "model": ...}`;
//! the completion is read from a configurable path into the JSON response
//! (`choices.0.text` by default). Every request and response is appended to a
//! JSON-lines transcript that can later be re-scored offline.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::TestCase;
use crate::eval::{task_label, TaskScore};
use crate::format::{
    build_fewshot_prompt, build_plain_prompt, extract_answer, FormatError, Operation,
};

pub const DEFAULT_TOKEN_ENV: &str = "PLACEVALUE_API_KEY";
pub const DEFAULT_RESPONSE_PATH: &str = "choices.0.text";

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("environment variable {0} holding the API token is not set")]
    MissingToken(String),
    #[error("invalid remote config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("transcript line {line}: {msg}")]
    Transcript { line: usize, msg: String },
    #[error("writing transcript: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    /// Question-and-answer pairs with plain numbers.
    PlainFewshot,
    /// The four worked decomposition examples.
    DecompositionFewshot,
}

impl PromptStyle {
    pub fn name(self) -> &'static str {
        match self {
            PromptStyle::PlainFewshot => "plain-fewshot",
            PromptStyle::DecompositionFewshot => "decomposition-fewshot",
        }
    }

    pub fn build(self, n1: i64, n2: i64, op: Operation) -> Result<String, FormatError> {
        match self {
            PromptStyle::PlainFewshot => build_plain_prompt(n1, n2, op),
            PromptStyle::DecompositionFewshot => build_fewshot_prompt(n1, n2, op),
        }
    }
}

impl FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" | "plain-fewshot" => Ok(PromptStyle::PlainFewshot),
            "decomposition" | "decomposition-fewshot" => Ok(PromptStyle::DecompositionFewshot),
            _ => Err(format!(
                "unknown prompt style `{s}` (expected plain-fewshot or decomposition-fewshot)"
            )),
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token; `None` sends
    /// no authorization header.
    pub token_env: Option<String>,
    /// Optional `model` field of the request body.
    pub model: Option<String>,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Only the first this many cases of each task are sent.
    pub max_cases: usize,
    pub timeout: Duration,
    /// Additional attempts after a failed request.
    pub retries: usize,
    /// Minimum time between the starts of two requests.
    pub min_delay: Duration,
    pub style: PromptStyle,
    pub response_path: String,
    /// Concurrent requests; 1 sends them one after another.
    pub parallelism: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, style: PromptStyle) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            token_env: Some(DEFAULT_TOKEN_ENV.to_string()),
            model: None,
            temperature: 0.7,
            max_tokens: 256,
            max_cases: 100,
            timeout: Duration::from_secs(60),
            retries: 3,
            min_delay: Duration::ZERO,
            style,
            response_path: DEFAULT_RESPONSE_PATH.to_string(),
            parallelism: 1,
        }
    }

    pub fn validate(&self) -> Result<(), RemoteError> {
        let bad = |m: &str| Err(RemoteError::InvalidConfig(m.to_string()));
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be non-negative");
        }
        if self.max_cases == 0 {
            return bad("max_cases must be at least 1");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if self.response_path.is_empty() {
            return bad("response path is empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
    /// No usable response after every attempt; left out of the accuracy.
    Skipped,
}

/// One line of the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub case_index: usize,
    pub task: String,
    pub n1: i64,
    pub n2: i64,
    pub op: String,
    pub expected: i64,
    pub style: PromptStyle,
    pub prompt: String,
    /// Response body of the last attempt, verbatim.
    pub raw_response: Option<String>,
    /// Text found at the response path.
    pub completion: Option<String>,
    pub extracted: Option<i64>,
    pub verdict: Verdict,
    pub attempts: usize,
    pub error: Option<String>,
}

/// Follows a dotted path such as `choices.0.text` into a JSON value.
pub fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(value, |v, key| match v {
        Value::Array(items) => items.get(key.parse::<usize>().ok()?),
        Value::Object(map) => map.get(key),
        _ => None,
    })
}

/// The completion string inside a raw response body.
pub fn completion_from_body(body: &str, path: &str) -> Result<String, String> {
    let json: Value =
        serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    match lookup(&json, path) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(format!("`{path}` is not a string: {other}")),
        None => Err(format!("response has no `{path}`")),
    }
}

/// Scores the first line of a completion: few-shot examples are one line
/// each, so anything after the first newline is the model starting a new
/// example.
pub fn score_completion(completion: &str) -> Option<i64> {
    extract_answer(completion.lines().next().unwrap_or(""))
}

/// Sends one prompt and returns the raw response body of a successful call.
pub trait CompletionClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String, String>;
}

/// HTTP client for a JSON completion endpoint.
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
    model: Option<String>,
    temperature: f64,
    max_tokens: usize,
}

impl HttpClient {
    pub fn new(cfg: &RemoteConfig) -> Result<Self, RemoteError> {
        let token = match &cfg.token_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| RemoteError::MissingToken(var.clone()))?)
            }
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpClient {
            agent,
            endpoint: cfg.endpoint.clone(),
            token,
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        })
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String, String> {
        let mut body = serde_json::json!({
            "prompt": prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        if let Some(model) = &self.model {
            body["model"] = Value::String(model.clone());
        }
        let mut request = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request.send_json(&body).map_err(|e| e.to_string())?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {status}: {text}"));
        }
        Ok(text)
    }
}

/// Keeps the first `max_cases` cases of every task, in their original order.
pub fn first_cases_per_task(cases: &[TestCase], max_cases: usize) -> Vec<TestCase> {
    let mut taken: HashMap<String, usize> = HashMap::new();
    cases
        .iter()
        .filter(|c| {
            let n = taken.entry(task_label(c.band(), c.op)).or_default();
            *n += 1;
            *n <= max_cases
        })
        .cloned()
        .collect()
}

struct Pacer {
    min_delay: Duration,
    last: Mutex<Option<Instant>>,
}

impl Pacer {
    fn wait(&self) {
        let mut last = self.last.lock().expect("pacer lock");
        if let Some(prev) = *last {
            let ready = prev + self.min_delay;
            let now = Instant::now();
            if ready > now {
                std::thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
    }
}

fn run_case(
    client: &dyn CompletionClient,
    cfg: &RemoteConfig,
    pacer: &Pacer,
    case_index: usize,
    case: &TestCase,
    prompt: String,
) -> TranscriptEntry {
    let mut entry = TranscriptEntry {
        case_index,
        task: task_label(case.band(), case.op),
        n1: case.n1,
        n2: case.n2,
        op: case.op.word().to_string(),
        expected: case.expected,
        style: cfg.style,
        prompt,
        raw_response: None,
        completion: None,
        extracted: None,
        verdict: Verdict::Skipped,
        attempts: 0,
        error: None,
    };
    for _ in 0..=cfg.retries {
        pacer.wait();
        entry.attempts += 1;
        match client.complete(&entry.prompt) {
            Ok(body) => {
                let parsed = completion_from_body(&body, &cfg.response_path);
                entry.raw_response = Some(body);
                match parsed {
                    Ok(completion) => {
                        entry.extracted = score_completion(&completion);
                        entry.verdict = if entry.extracted == Some(case.expected) {
                            Verdict::Correct
                        } else {
                            Verdict::Incorrect
                        };
                        entry.completion = Some(completion);
                        entry.error = None;
                        return entry;
                    }
                    Err(e) => entry.error = Some(e),
                }
            }
            Err(e) => entry.error = Some(e),
        }
    }
    log::warn!(
        "case {case_index} ({} {} {}) skipped after {} attempts: {}",
        case.n1,
        case.op.word(),
        case.n2,
        entry.attempts,
        entry.error.as_deref().unwrap_or("unknown error")
    );
    entry
}

fn write_entry(out: &mut dyn Write, entry: &TranscriptEntry) -> Result<(), RemoteError> {
    serde_json::to_writer(&mut *out, entry).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Evaluates the first `cfg.max_cases` cases of every task through `client`.
/// Entries are appended to `transcript` in case order.
pub fn run_remote_eval(
    client: &dyn CompletionClient,
    cfg: &RemoteConfig,
    cases: &[TestCase],
    transcript: &mut dyn Write,
) -> Result<Vec<TranscriptEntry>, RemoteError> {
    cfg.validate()?;
    let cases = first_cases_per_task(cases, cfg.max_cases);
    let prompts = cases
        .iter()
        .map(|c| cfg.style.build(c.n1, c.n2, c.op))
        .collect::<Result<Vec<_>, _>>()?;
    let pacer = Pacer {
        min_delay: cfg.min_delay,
        last: Mutex::new(None),
    };

    if cfg.parallelism == 1 {
        let mut entries = Vec::with_capacity(cases.len());
        for (i, (case, prompt)) in cases.iter().zip(prompts).enumerate() {
            let entry = run_case(client, cfg, &pacer, i, case, prompt);
            write_entry(transcript, &entry)?;
            entries.push(entry);
        }
        return Ok(entries);
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<TranscriptEntry>>> =
        cases.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..cfg.parallelism.min(cases.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cases.len() {
                    break;
                }
                let entry = run_case(client, cfg, &pacer, i, &cases[i], prompts[i].clone());
                *slots[i].lock().expect("slot lock") = Some(entry);
            });
        }
    });
    let entries: Vec<TranscriptEntry> = slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every case ran"))
        .collect();
    for entry in &entries {
        write_entry(transcript, entry)?;
    }
    Ok(entries)
}

/// Per-task scores; skipped cases are left out of the denominator.
pub fn score_entries(entries: &[TranscriptEntry]) -> BTreeMap<String, TaskScore> {
    let mut out: BTreeMap<String, TaskScore> = BTreeMap::new();
    for e in entries {
        let s = out.entry(e.task.clone()).or_default();
        match e.verdict {
            Verdict::Correct => {
                s.correct += 1;
                s.evaluated += 1;
            }
            Verdict::Incorrect => s.evaluated += 1,
            Verdict::Skipped => {}
        }
    }
    out
}

pub fn skipped_count(entries: &[TranscriptEntry]) -> usize {
    entries
        .iter()
        .filter(|e| e.verdict == Verdict::Skipped)
        .count()
}

/// Parses a transcript and re-scores every answered entry from its recorded
/// raw response, without any network access.
pub fn replay_transcript(
    text: &str,
    response_path: &str,
) -> Result<Vec<TranscriptEntry>, RemoteError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| RemoteError::Transcript { line: i + 1, msg };
        let mut e: TranscriptEntry = serde_json::from_str(line).map_err(|x| err(x.to_string()))?;
        let completion = e
            .raw_response
            .as_deref()
            .and_then(|body| completion_from_body(body, response_path).ok());
        match completion {
            Some(c) => {
                e.extracted = score_completion(&c);
                e.verdict = if e.extracted == Some(e.expected) {
                    Verdict::Correct
                } else {
                    Verdict::Incorrect
                };
                e.completion = Some(c);
            }
            None => {
                e.extracted = None;
                e.completion = None;
                e.verdict = Verdict::Skipped;
            }
        }
        entries.push(e);
    }
    Ok(entries)
}
