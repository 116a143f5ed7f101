//! Operand sampling, train/test disjointness, dataset files and test-set loading.
//!
//! For a band of `N` digits both operands are drawn uniformly from
//! `[10^(N-1), 10^N - 1]`, except the two-digit band, which draws from `[0, 99]`
//! so that one-digit numbers are included. Pairs are drawn with replacement and
//! sampled once per operation, then rendered under every approach.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::format::{render_observation, Approach, FormatError, Operation, MAGNITUDE_LIMIT};
use crate::kv::KvMap;

/// Attempts allowed when replacing a single pair that collides with the test set.
pub const RESAMPLE_BUDGET: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid sampling spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("could not draw a pair outside the test set in the {digits}-digit band after {attempts} attempts")]
    ResampleExhausted { digits: u32, attempts: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Inclusive operand range of a digit band.
pub fn band_range(digits: u32) -> (i64, i64) {
    match digits {
        0 | 1 => (0, 9),
        2 => (0, 99),
        n => (10i64.pow(n - 1), 10i64.pow(n) - 1),
    }
}

/// Digit band a pair belongs to; one-digit operands count as two-digit.
pub fn digit_band(n1: i64, n2: i64) -> u32 {
    let width = |n: i64| n.unsigned_abs().to_string().len() as u32;
    width(n1).max(width(n2)).max(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Band {
    pub digits: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingSpec {
    pub op: Operation,
    pub bands: Vec<Band>,
    pub seed: u64,
}

impl SamplingSpec {
    /// 3000 pairs in each of the 2..=5 digit bands for addition and
    /// subtraction; 3000 two-digit pairs for multiplication.
    pub fn standard(op: Operation, seed: u64) -> Self {
        let digits: &[u32] = match op {
            Operation::Add | Operation::Sub => &[2, 3, 4, 5],
            Operation::Mul => &[2],
        };
        SamplingSpec {
            op,
            bands: digits
                .iter()
                .map(|&d| Band {
                    digits: d,
                    count: 3000,
                })
                .collect(),
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.bands.iter().map(|b| b.count).sum()
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.bands.is_empty() {
            return Err(DatagenError::InvalidSpec("no bands".into()));
        }
        let mut seen = HashSet::new();
        for band in &self.bands {
            if !(1..=5).contains(&band.digits) {
                return Err(DatagenError::InvalidSpec(format!(
                    "{}-digit band is not supported (1..=5)",
                    band.digits
                )));
            }
            if band.count == 0 {
                return Err(DatagenError::InvalidSpec(format!(
                    "{}-digit band is empty",
                    band.digits
                )));
            }
            if !seen.insert(band.digits) {
                return Err(DatagenError::InvalidSpec(format!(
                    "{}-digit band listed twice",
                    band.digits
                )));
            }
            let (_, hi) = band_range(band.digits);
            if self.op.apply(hi, hi).abs() >= MAGNITUDE_LIMIT {
                return Err(DatagenError::InvalidSpec(format!(
                    "{}-digit {} results exceed the supported range",
                    band.digits, self.op
                )));
            }
        }
        Ok(())
    }

    /// `2:3000,3:3000`
    pub fn bands_string(&self) -> String {
        self.bands
            .iter()
            .map(|b| format!("{}:{}", b.digits, b.count))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_bands(s: &str) -> Result<Vec<Band>, DatagenError> {
        s.split(',')
            .map(|part| {
                let (d, c) = part.split_once(':').ok_or_else(|| {
                    DatagenError::InvalidSpec(format!("band `{part}` is not `digits:count`"))
                })?;
                let parse = |x: &str| {
                    x.trim().parse::<usize>().map_err(|_| {
                        DatagenError::InvalidSpec(format!("band `{part}` is not `digits:count`"))
                    })
                };
                Ok(Band {
                    digits: parse(d)? as u32,
                    count: parse(c)?,
                })
            })
            .collect()
    }

    fn rng(&self, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let op_index = Operation::ALL.iter().position(|o| *o == self.op).unwrap() as u64;
        rng.set_stream(purpose * 16 + op_index);
        rng
    }
}

/// An operand pair tagged with the band it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampledPair {
    pub digits: u32,
    pub n1: i64,
    pub n2: i64,
}

fn draw(rng: &mut ChaCha8Rng, digits: u32) -> (i64, i64) {
    let (lo, hi) = band_range(digits);
    (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
}

pub fn sample_pairs(spec: &SamplingSpec) -> Result<Vec<SampledPair>, DatagenError> {
    spec.validate()?;
    let mut rng = spec.rng(0);
    let mut pairs = Vec::with_capacity(spec.total());
    for band in &spec.bands {
        for _ in 0..band.count {
            let (n1, n2) = draw(&mut rng, band.digits);
            pairs.push(SampledPair {
                digits: band.digits,
                n1,
                n2,
            });
        }
    }
    Ok(pairs)
}

/// Replaces every pair that also appears (as an ordered pair) in `test` with a
/// fresh draw from the same band. Test cases of other operations are ignored.
pub fn exclude_test_pairs(
    mut pairs: Vec<SampledPair>,
    test: &[TestCase],
    spec: &SamplingSpec,
) -> Result<Vec<SampledPair>, DatagenError> {
    let forbidden: HashSet<(i64, i64)> = test
        .iter()
        .filter(|c| c.op == spec.op)
        .map(|c| (c.n1, c.n2))
        .collect();
    if forbidden.is_empty() {
        return Ok(pairs);
    }
    let mut rng = spec.rng(1);
    for pair in pairs.iter_mut() {
        if !forbidden.contains(&(pair.n1, pair.n2)) {
            continue;
        }
        let mut replaced = false;
        for _ in 0..RESAMPLE_BUDGET {
            let (n1, n2) = draw(&mut rng, pair.digits);
            if !forbidden.contains(&(n1, n2)) {
                pair.n1 = n1;
                pair.n2 = n2;
                replaced = true;
                break;
            }
        }
        if !replaced {
            return Err(DatagenError::ResampleExhausted {
                digits: pair.digits,
                attempts: RESAMPLE_BUDGET,
            });
        }
    }
    Ok(pairs)
}

/// Draws `per_band` distinct pairs in each band, for use as a held-out test set.
pub fn sample_test_cases(
    op: Operation,
    bands: &[u32],
    per_band: usize,
    seed: u64,
) -> Result<Vec<TestCase>, DatagenError> {
    let spec = SamplingSpec {
        op,
        bands: bands
            .iter()
            .map(|&d| Band {
                digits: d,
                count: per_band,
            })
            .collect(),
        seed,
    };
    spec.validate()?;
    let mut rng = spec.rng(2);
    let mut cases = Vec::with_capacity(spec.total());
    for &digits in bands {
        let (lo, hi) = band_range(digits);
        let space = ((hi - lo + 1) as u128).pow(2);
        if per_band as u128 > space {
            return Err(DatagenError::InvalidSpec(format!(
                "{per_band} distinct pairs requested from a {digits}-digit band of {space}"
            )));
        }
        let mut seen = HashSet::new();
        while seen.len() < per_band {
            let (n1, n2) = draw(&mut rng, digits);
            if seen.insert((n1, n2)) {
                cases.push(TestCase::new(n1, n2, op));
            }
        }
    }
    Ok(cases)
}

pub fn render_dataset_lines(
    pairs: &[SampledPair],
    op: Operation,
    approach: Approach,
) -> Result<Vec<String>, DatagenError> {
    pairs
        .iter()
        .map(|p| Ok(render_observation(p.n1, p.n2, op, approach)?.text))
        .collect()
}

/// Sidecar path for a dataset file: `add-decomposition.txt` → `add-decomposition.meta`.
pub fn metadata_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("meta")
}

/// Writes one observation per line and a `key = value` metadata sidecar.
/// Returns the sidecar path.
pub fn write_dataset(
    pairs: &[SampledPair],
    spec: &SamplingSpec,
    approach: Approach,
    path: &Path,
) -> Result<PathBuf, DatagenError> {
    let lines = render_dataset_lines(pairs, spec.op, approach)?;
    let mut body = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for line in &lines {
        body.push_str(line);
        body.push('\n');
    }
    fs::write(path, body).map_err(io_error(path))?;

    let mut meta = KvMap::new();
    meta.set("format", "placevalue-dataset v1");
    meta.set("op", spec.op);
    meta.set("approach", approach);
    meta.set("seed", spec.seed);
    meta.set("bands", spec.bands_string());
    meta.set("lines", lines.len());
    for band in &spec.bands {
        let n = pairs.iter().filter(|p| p.digits == band.digits).count();
        meta.set(format!("count.{}", band.digits), n);
    }
    let meta_path = metadata_path(path);
    fs::write(&meta_path, meta.render()).map_err(io_error(&meta_path))?;
    Ok(meta_path)
}

/// Reads a dataset file back as one string per line.
pub fn read_dataset(path: &Path) -> Result<Vec<String>, DatagenError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// A held-out query with its exact answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub n1: i64,
    pub n2: i64,
    pub op: Operation,
    pub expected: i64,
    pub source_line: String,
}

impl TestCase {
    pub fn new(n1: i64, n2: i64, op: Operation) -> Self {
        let expected = op.apply(n1, n2);
        TestCase {
            n1,
            n2,
            op,
            expected,
            source_line: native_line(n1, n2, op, expected),
        }
    }

    pub fn band(&self) -> u32 {
        digit_band(self.n1, self.n2)
    }
}

fn native_line(n1: i64, n2: i64, op: Operation, expected: i64) -> String {
    format!("{n1}\t{}\t{n2}\t{expected}", op.word())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSetFormat {
    /// `n1<TAB>word<TAB>n2<TAB>expected`
    Native,
    /// One JSON object per line with `context` ("What is A plus B?") and `completion`.
    Gpt3Jsonl,
}

impl FromStr for TestSetFormat {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" | "tsv" => Ok(TestSetFormat::Native),
            "gpt3-jsonl" | "jsonl" => Ok(TestSetFormat::Gpt3Jsonl),
            _ => Err(DatagenError::InvalidSpec(format!(
                "unknown test-set format `{s}`"
            ))),
        }
    }
}

impl fmt::Display for TestSetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestSetFormat::Native => "native",
            TestSetFormat::Gpt3Jsonl => "gpt3-jsonl",
        })
    }
}

/// A line whose stated answer disagrees with the arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlaggedLine {
    pub line: usize,
    pub text: String,
    pub stated: i64,
    pub oracle: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TestSet {
    pub cases: Vec<TestCase>,
    /// Lines excluded from `cases` because their answer is wrong.
    pub flagged: Vec<FlaggedLine>,
}

pub fn load_test_set(path: &Path, format: TestSetFormat) -> Result<TestSet, DatagenError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    parse_test_set(&text, format, path)
}

pub fn parse_test_set(
    text: &str,
    format: TestSetFormat,
    origin: &Path,
) -> Result<TestSet, DatagenError> {
    let mut set = TestSet::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |msg: String| DatagenError::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (n1, op, n2, stated) = match format {
            TestSetFormat::Native => parse_native_line(line).map_err(fail)?,
            TestSetFormat::Gpt3Jsonl => parse_jsonl_line(line).map_err(fail)?,
        };
        let oracle = op.apply(n1, n2);
        if stated != oracle {
            log::warn!(
                "{}:{}: stated answer {stated} but {n1} {op} {n2} = {oracle}",
                origin.display(),
                i + 1
            );
            set.flagged.push(FlaggedLine {
                line: i + 1,
                text: line.to_string(),
                stated,
                oracle,
            });
            continue;
        }
        set.cases.push(TestCase {
            n1,
            n2,
            op,
            expected: oracle,
            source_line: line.to_string(),
        });
    }
    Ok(set)
}

fn parse_int(s: &str) -> Result<i64, String> {
    s.trim()
        .parse::<i64>()
        .map_err(|_| format!("`{}` is not an integer", s.trim()))
}

fn parse_native_line(line: &str) -> Result<(i64, Operation, i64, i64), String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!(
            "expected 4 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let op: Operation = fields[1]
        .trim()
        .parse()
        .map_err(|e: FormatError| e.to_string())?;
    Ok((
        parse_int(fields[0])?,
        op,
        parse_int(fields[2])?,
        parse_int(fields[3])?,
    ))
}

fn parse_jsonl_line(line: &str) -> Result<(i64, Operation, i64, i64), String> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let field = |name: &str| {
        value
            .get(name)
            .and_then(|v| v.as_str())
            .ok_or_else(|| format!("missing string field `{name}`"))
    };
    let context = field("context")?;
    let completion = field("completion")?;
    let start = context
        .rfind("What is ")
        .ok_or_else(|| "context has no `What is` question".to_string())?;
    let question = &context[start + "What is ".len()..];
    let question = &question[..question.find('?').ok_or("question has no `?`")?];
    let parts: Vec<&str> = question.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(format!("cannot read operands from `{question}`"));
    }
    let op = Operation::from_word(parts[1])
        .ok_or_else(|| format!("unknown operator word `{}`", parts[1]))?;
    Ok((
        parse_int(parts[0])?,
        op,
        parse_int(parts[2])?,
        parse_int(completion)?,
    ))
}

/// Writes test cases in the native TSV format.
pub fn write_test_set(cases: &[TestCase], path: &Path) -> Result<(), DatagenError> {
    let mut body = String::new();
    for c in cases {
        body.push_str(&native_line(c.n1, c.n2, c.op, c.expected));
        body.push('\n');
    }
    fs::write(path, body).map_err(io_error(path))
}
