//! Rendering and parsing of numbers and observation strings.
//!
//! Three observation grammars are supported:
//!
//! * **decomposition**: `Compute with pipeline 1201 plus 1302. Translate from number
//!   to decomposition: 1201 = 1 units, 0 tens, ...` followed by the digit-wise
//!   operation line and the reconstruction line.
//! * **baseline**: `Compute 1201 plus 1302. Final result = 2503`.
//! * **spaced**: `Compute 1201 plus 1302. 1 2 0 1 plus 1 3 0 2 = 2 5 0 3. Final result = 2503`.
//!
//! Every function here is pure. Magnitudes are limited to `|n| < 10^6`, which
//! covers the largest five-digit sum (199998) with its carry into the sixth place.

use std::fmt;
use std::str::FromStr;

/// Exclusive upper bound on the magnitude of any rendered number.
pub const MAGNITUDE_LIMIT: i64 = 1_000_000;

const PLACE_LABELS: [&str; 6] = [
    "units",
    "tens",
    "hundreds",
    "thousands",
    "tens of thousands",
    "hundreds of thousands",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("{value} is outside the supported range (|n| < {MAGNITUDE_LIMIT})")]
    OutOfRange { value: i64 },
    #[error("place index {0} has no name (supported places: 0..=5)")]
    UnknownPlace(usize),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unknown {what} `{value}`")]
    UnknownName { what: &'static str, value: String },
}

fn check_range(n: i64) -> Result<(), FormatError> {
    if n.unsigned_abs() >= MAGNITUDE_LIMIT as u64 {
        Err(FormatError::OutOfRange { value: n })
    } else {
        Ok(())
    }
}

/// Decimal place of a digit; index 0 is the units place.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlaceName(u8);

impl PlaceName {
    pub const UNITS: PlaceName = PlaceName(0);

    pub fn new(index: usize) -> Result<Self, FormatError> {
        if index < PLACE_LABELS.len() {
            Ok(PlaceName(index as u8))
        } else {
            Err(FormatError::UnknownPlace(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> &'static str {
        PLACE_LABELS[self.0 as usize]
    }

    pub fn from_label(label: &str) -> Option<Self> {
        PLACE_LABELS
            .iter()
            .position(|l| *l == label)
            .map(|i| PlaceName(i as u8))
    }

    /// `10^index`.
    pub fn weight(self) -> i64 {
        10i64.pow(self.0 as u32)
    }
}

impl fmt::Display for PlaceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DigitOrder {
    /// Units first.
    Ascending,
    /// Highest place first.
    Descending,
}

/// A signed number written as `digit place` terms.
///
/// Digits are kept in ascending place order. Places are consecutive from the
/// units, and the highest digit is nonzero unless the number is zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecomposedNumber {
    negative: bool,
    digits: Vec<(u8, PlaceName)>,
}

impl DecomposedNumber {
    pub fn from_value(n: i64) -> Result<Self, FormatError> {
        check_range(n)?;
        let mut magnitude = n.unsigned_abs();
        let mut digits = Vec::new();
        let mut place = 0;
        loop {
            digits.push(((magnitude % 10) as u8, PlaceName(place)));
            magnitude /= 10;
            place += 1;
            if magnitude == 0 {
                break;
            }
        }
        Ok(DecomposedNumber {
            negative: n < 0,
            digits,
        })
    }

    pub fn is_negative(&self) -> bool {
        self.negative
    }

    /// `(digit, place)` pairs, units first.
    pub fn digits(&self) -> &[(u8, PlaceName)] {
        &self.digits
    }

    pub fn value(&self) -> i64 {
        let magnitude: i64 = self
            .digits
            .iter()
            .map(|&(d, p)| i64::from(d) * p.weight())
            .sum();
        if self.negative {
            -magnitude
        } else {
            magnitude
        }
    }

    pub fn render(&self, order: DigitOrder) -> String {
        let mut out = String::new();
        if self.negative {
            out.push_str("minus ");
        }
        let mut push_term = |i: usize, (d, p): &(u8, PlaceName)| {
            if i > 0 {
                out.push_str(", ");
            }
            out.push(char::from(b'0' + d));
            out.push(' ');
            out.push_str(p.label());
        };
        match order {
            DigitOrder::Ascending => self
                .digits
                .iter()
                .enumerate()
                .for_each(|(i, t)| push_term(i, t)),
            DigitOrder::Descending => self
                .digits
                .iter()
                .rev()
                .enumerate()
                .for_each(|(i, t)| push_term(i, t)),
        }
        out
    }
}

impl FromStr for DecomposedNumber {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut cursor = Cursor::new(s);
        let number = cursor.decomposition()?;
        cursor.finish()?;
        Ok(number)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operation {
    Add,
    Sub,
    Mul,
}

impl Operation {
    pub const ALL: [Operation; 3] = [Operation::Add, Operation::Sub, Operation::Mul];

    /// Operator word used inside sentences: `plus`, `minus`, `times`.
    pub fn word(self) -> &'static str {
        match self {
            Operation::Add => "plus",
            Operation::Sub => "minus",
            Operation::Mul => "times",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Operation::Add => "+",
            Operation::Sub => "-",
            Operation::Mul => "*",
        }
    }

    /// Leading verb of the digit-wise line of a decomposition observation.
    pub fn verb(self) -> &'static str {
        match self {
            Operation::Add => "Sum",
            Operation::Sub => "Subtract",
            Operation::Mul => "Multiply",
        }
    }

    /// Short identifier used in file names and on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Operation::Add => "add",
            Operation::Sub => "sub",
            Operation::Mul => "mul",
        }
    }

    /// Suffix of the task column label (`5D+`, `2Dx`).
    pub fn task_suffix(self) -> char {
        match self {
            Operation::Add => '+',
            Operation::Sub => '-',
            Operation::Mul => 'x',
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Operation::Add => a + b,
            Operation::Sub => a - b,
            Operation::Mul => a * b,
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Operation::ALL.into_iter().find(|op| op.word() == word)
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operation {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add" | "plus" | "+" => Ok(Operation::Add),
            "sub" | "minus" | "-" => Ok(Operation::Sub),
            "mul" | "times" | "*" | "x" => Ok(Operation::Mul),
            _ => Err(FormatError::UnknownName {
                what: "operation",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Approach {
    Decomposition,
    Baseline,
    Spaced,
}

impl Approach {
    pub const ALL: [Approach; 3] = [
        Approach::Decomposition,
        Approach::Baseline,
        Approach::Spaced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Approach::Decomposition => "decomposition",
            Approach::Baseline => "baseline",
            Approach::Spaced => "spaced",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Approach {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Approach::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| FormatError::UnknownName {
                what: "approach",
                value: s.to_string(),
            })
    }
}

/// One rendered training or evaluation record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArithObservation {
    pub n1: i64,
    pub n2: i64,
    pub op: Operation,
    pub result: i64,
    pub approach: Approach,
    pub text: String,
    /// The part of `text` given to a model at inference time.
    pub prompt_prefix: String,
}

impl ArithObservation {
    /// What a perfect model generates after `prompt_prefix`.
    pub fn continuation(&self) -> &str {
        &self.text[self.prompt_prefix.len()..]
    }
}

pub fn decompose(n: i64, order: DigitOrder) -> Result<String, FormatError> {
    Ok(DecomposedNumber::from_value(n)?.render(order))
}

/// Parses a decomposition string in either digit order and returns its value.
pub fn recompose(s: &str) -> Result<i64, FormatError> {
    s.parse::<DecomposedNumber>().map(|d| d.value())
}

/// `868` → `"8 6 8"`, `-19` → `"-1 9"`.
pub fn space_digits(n: i64) -> Result<String, FormatError> {
    check_range(n)?;
    let digits = n.unsigned_abs().to_string();
    let mut out = String::with_capacity(digits.len() * 2 + 1);
    if n < 0 {
        out.push('-');
    }
    for (i, c) in digits.chars().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push(c);
    }
    Ok(out)
}

/// The input prompt shown to a model for `(n1, op, n2)` under `approach`.
pub fn prompt_prefix(
    n1: i64,
    n2: i64,
    op: Operation,
    approach: Approach,
) -> Result<String, FormatError> {
    check_range(n1)?;
    check_range(n2)?;
    let w = op.word();
    Ok(match approach {
        Approach::Decomposition => format!("Compute with pipeline {n1} {w} {n2}."),
        Approach::Baseline | Approach::Spaced => format!("Compute {n1} {w} {n2}."),
    })
}

pub fn render_observation(
    n1: i64,
    n2: i64,
    op: Operation,
    approach: Approach,
) -> Result<ArithObservation, FormatError> {
    let result = op.apply(n1, n2);
    check_range(result)?;
    let prompt_prefix = prompt_prefix(n1, n2, op, approach)?;
    let body = match approach {
        Approach::Baseline => format!(" Final result = {result}"),
        Approach::Spaced => format!(
            " {} {} {} = {}. Final result = {result}",
            space_digits(n1)?,
            op.word(),
            space_digits(n2)?,
            space_digits(result)?
        ),
        Approach::Decomposition => {
            let asc = DigitOrder::Ascending;
            let d1 = decompose(n1, asc)?;
            let d2 = decompose(n2, asc)?;
            let dr = decompose(result, asc)?;
            format!(
                " Translate from number to decomposition: {n1} = {d1}. \
                 Translate from number to decomposition: {n2} = {d2}. \
                 {verb} {d1} {sym} {d2} = {dr}. \
                 Translate from decomposition to number: {dr} = {result}",
                verb = op.verb(),
                sym = op.symbol(),
            )
        }
    };
    let mut text = prompt_prefix.clone();
    text.push_str(&body);
    Ok(ArithObservation {
        n1,
        n2,
        op,
        result,
        approach,
        text,
        prompt_prefix,
    })
}

/// Fields recovered from an observation string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedObservation {
    pub approach: Approach,
    pub op: Operation,
    pub n1: i64,
    pub n2: i64,
    /// The final number as written, not recomputed.
    pub result: i64,
}

/// Parses a full observation string under whichever grammar it matches.
///
/// Intermediate segments must agree with each other (decompositions of the
/// operands recompose to the operands, the result segment recomposes to the
/// final number); this does not check the arithmetic itself.
pub fn parse_observation(text: &str) -> Result<ParsedObservation, FormatError> {
    let mut c = Cursor::new(text);
    let decomposition = c.eat("Compute with pipeline ");
    if !decomposition {
        c.expect("Compute ")?;
    }
    let n1 = c.int()?;
    c.expect(" ")?;
    let op = c.op_word()?;
    c.expect(" ")?;
    let n2 = c.int()?;
    c.expect(".")?;

    let (approach, result) = if decomposition {
        for operand in [n1, n2] {
            c.expect(" Translate from number to decomposition: ")?;
            let at = c.pos;
            if c.int()? != operand {
                return Err(c.error_at(at, "translated number differs from operand"));
            }
            c.expect(" = ")?;
            c.decomposition_of(operand)?;
            c.expect(".")?;
        }
        c.expect(" ")?;
        c.expect(op.verb())?;
        c.expect(" ")?;
        c.decomposition_of(n1)?;
        c.expect(" ")?;
        c.expect(op.symbol())?;
        c.expect(" ")?;
        c.decomposition_of(n2)?;
        c.expect(" = ")?;
        let segment = c.decomposition()?.value();
        c.expect(". Translate from decomposition to number: ")?;
        c.decomposition_of(segment)?;
        c.expect(" = ")?;
        let at = c.pos;
        let result = c.int()?;
        if result != segment {
            return Err(c.error_at(at, "final number differs from decomposed result"));
        }
        (Approach::Decomposition, result)
    } else if c.eat(" Final result = ") {
        (Approach::Baseline, c.int()?)
    } else {
        c.expect(" ")?;
        c.spaced_of(n1)?;
        c.expect(" ")?;
        c.expect(op.word())?;
        c.expect(" ")?;
        c.spaced_of(n2)?;
        c.expect(" = ")?;
        let segment = c.spaced()?;
        c.expect(". Final result = ")?;
        let at = c.pos;
        let result = c.int()?;
        if result != segment {
            return Err(c.error_at(at, "final number differs from spaced result"));
        }
        (Approach::Spaced, result)
    };
    c.finish()?;
    Ok(ParsedObservation {
        approach,
        op,
        n1,
        n2,
        result,
    })
}

/// Returns the integer a generated string ends with, if any.
///
/// Trailing whitespace and sentence punctuation are ignored. A `-` directly
/// before the digits counts as a sign unless it follows another digit.
pub fn extract_answer(generated: &str) -> Option<i64> {
    let t = generated.trim_end_matches(|c: char| {
        c.is_whitespace() || matches!(c, '.' | ',' | ';' | ':' | '!' | '?')
    });
    let bytes = t.as_bytes();
    let mut start = bytes.len();
    while start > 0 && bytes[start - 1].is_ascii_digit() {
        start -= 1;
    }
    if start == bytes.len() {
        return None;
    }
    let digits = t[start..].trim_start_matches('0');
    if digits.len() > 18 {
        return None;
    }
    let magnitude: i64 = if digits.is_empty() {
        0
    } else {
        digits.parse().ok()?
    };
    let signed =
        start > 0 && bytes[start - 1] == b'-' && (start == 1 || !bytes[start - 2].is_ascii_digit());
    Some(if signed { -magnitude } else { magnitude })
}

const FEWSHOT_HEADER: &str =
    "This application makes an arithmetic operation decomposing the input numbers.";
const FEWSHOT_SEPARATOR: &str = "###";
/// Operand pairs of the four worked examples in the decomposition few-shot prompt.
pub const FEWSHOT_OPERANDS: [(i64, i64); 4] = [(28, 39), (804, 121), (1201, 1302), (97734, 86328)];
/// Multiplication examples: the leading two digits of each pair above, so every
/// product stays within the six decomposable places.
pub const MUL_FEWSHOT_OPERANDS: [(i64, i64); 4] = [(28, 39), (80, 12), (12, 13), (97, 86)];

/// The worked-example operand pairs used for `op`.
pub fn fewshot_operands(op: Operation) -> [(i64, i64); 4] {
    match op {
        Operation::Mul => MUL_FEWSHOT_OPERANDS,
        _ => FEWSHOT_OPERANDS,
    }
}

fn fewshot_example(a: i64, b: i64, op: Operation) -> Result<String, FormatError> {
    let r = op.apply(a, b);
    let asc = DigitOrder::Ascending;
    let desc = DigitOrder::Descending;
    Ok(format!(
        "Compute with pipeline {a} {w} {b}. \
         Translate from number to decomposition: {a} = {}. \
         Translate from number to decomposition: {b} = {}. \
         {verb} {} {sym} {} = {}. \
         Translate from decomposition to number: {} = {r}",
        decompose(a, desc)?,
        decompose(b, desc)?,
        decompose(a, asc)?,
        decompose(b, asc)?,
        decompose(r, asc)?,
        decompose(r, desc)?,
        w = op.word(),
        verb = op.verb(),
        sym = op.symbol(),
    ))
}

/// Few-shot prompt with four decomposition worked examples and a final query.
///
/// Lines are joined with `\n`; the prompt ends right after the query's period.
/// For subtraction and multiplication the operator words are substituted and
/// the worked examples are recomputed under that operation.
pub fn build_fewshot_prompt(n1: i64, n2: i64, op: Operation) -> Result<String, FormatError> {
    let mut lines = vec![FEWSHOT_HEADER.to_string()];
    for (a, b) in fewshot_operands(op) {
        lines.push(FEWSHOT_SEPARATOR.to_string());
        lines.push(fewshot_example(a, b, op)?);
    }
    lines.push(FEWSHOT_SEPARATOR.to_string());
    lines.push(prompt_prefix(n1, n2, op, Approach::Decomposition)?);
    Ok(lines.join("\n"))
}

/// `What is 48 plus 76?`
pub fn plain_question(n1: i64, n2: i64, op: Operation) -> String {
    format!("What is {n1} {} {n2}?", op.word())
}

/// Few-shot prompt in plain question/answer form over the same example operands.
pub fn build_plain_prompt(n1: i64, n2: i64, op: Operation) -> Result<String, FormatError> {
    check_range(n1)?;
    check_range(n2)?;
    let mut blocks: Vec<String> = fewshot_operands(op)
        .iter()
        .map(|&(a, b)| format!("Q: {}\nA: {}", plain_question(a, b, op), op.apply(a, b)))
        .collect();
    blocks.push(format!("Q: {}\nA:", plain_question(n1, n2, op)));
    Ok(blocks.join("\n\n"))
}

/// Byte cursor over the observation grammars.
struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Self {
        Cursor { s, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn error_at(&self, pos: usize, msg: impl Into<String>) -> FormatError {
        FormatError::Parse {
            pos,
            msg: msg.into(),
        }
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), FormatError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.error_at(self.pos, format!("expected `{lit}`")))
        }
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos == self.s.len() {
            Ok(())
        } else {
            Err(self.error_at(self.pos, "unexpected trailing text"))
        }
    }

    fn peek_digit(&self, offset: usize) -> Option<u8> {
        self.s
            .as_bytes()
            .get(self.pos + offset)
            .filter(|b| b.is_ascii_digit())
            .map(|b| b - b'0')
    }

    /// Canonical decimal integer: optional `-`, no leading zeros.
    fn int(&mut self) -> Result<i64, FormatError> {
        let start = self.pos;
        let negative = self.eat("-");
        let digits_start = self.pos;
        while self.peek_digit(0).is_some() {
            self.pos += 1;
        }
        let digits = &self.s[digits_start..self.pos];
        if digits.is_empty() {
            return Err(self.error_at(start, "expected an integer"));
        }
        if digits.len() > 1 && digits.starts_with('0') {
            return Err(self.error_at(start, "leading zero"));
        }
        if digits.len() > 7 {
            return Err(self.error_at(start, "integer too long"));
        }
        let magnitude: i64 = digits.parse().expect("ascii digits");
        if negative && magnitude == 0 {
            return Err(self.error_at(start, "negative zero"));
        }
        let value = if negative { -magnitude } else { magnitude };
        check_range(value).map_err(|_| self.error_at(start, "integer out of range"))?;
        Ok(value)
    }

    fn op_word(&mut self) -> Result<Operation, FormatError> {
        for op in Operation::ALL {
            if self.eat(op.word()) {
                return Ok(op);
            }
        }
        Err(self.error_at(self.pos, "expected `plus`, `minus` or `times`"))
    }

    fn place_label(&mut self) -> Result<PlaceName, FormatError> {
        let at = self.pos;
        // Longest label first so `tens of thousands` wins over `tens`.
        let mut order: Vec<usize> = (0..PLACE_LABELS.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(PLACE_LABELS[i].len()));
        for i in order {
            let label = PLACE_LABELS[i];
            if self.rest().starts_with(label) {
                let boundary = self.rest()[label.len()..]
                    .chars()
                    .next()
                    .is_none_or(|c| !c.is_alphanumeric());
                if boundary {
                    self.pos += label.len();
                    return Ok(PlaceName(i as u8));
                }
            }
        }
        Err(self.error_at(at, "unknown place label"))
    }

    fn decomposition(&mut self) -> Result<DecomposedNumber, FormatError> {
        let start = self.pos;
        let negative = self.eat("minus ");
        let mut terms: Vec<(u8, PlaceName, usize)> = Vec::new();
        loop {
            let at = self.pos;
            let digit = self
                .peek_digit(0)
                .ok_or_else(|| self.error_at(at, "expected a digit"))?;
            if self.peek_digit(1).is_some() {
                return Err(self.error_at(at, "decomposition term must be a single digit"));
            }
            self.pos += 1;
            self.expect(" ")?;
            let place = self.place_label()?;
            if terms.iter().any(|t| t.1 == place) {
                return Err(self.error_at(at, format!("duplicate place `{place}`")));
            }
            terms.push((digit, place, at));
            if self.rest().starts_with(", ") && self.peek_digit(2).is_some() {
                self.pos += 2;
            } else {
                break;
            }
        }
        let descending = terms.len() > 1 && terms[0].1.index() != 0;
        let n = terms.len();
        for (i, &(_, place, at)) in terms.iter().enumerate() {
            let want = if descending { n - 1 - i } else { i };
            if place.index() != want {
                return Err(self.error_at(at, "places must be consecutive from the units"));
            }
        }
        if descending {
            terms.reverse();
        }
        let top = terms.last().expect("at least one term");
        if n > 1 && top.0 == 0 {
            return Err(self.error_at(top.2, "highest place digit is zero"));
        }
        if negative && n == 1 && top.0 == 0 {
            return Err(self.error_at(start, "negative zero"));
        }
        Ok(DecomposedNumber {
            negative,
            digits: terms.into_iter().map(|(d, p, _)| (d, p)).collect(),
        })
    }

    fn decomposition_of(&mut self, expected: i64) -> Result<(), FormatError> {
        let at = self.pos;
        if self.decomposition()?.value() != expected {
            return Err(self.error_at(at, format!("decomposition does not equal {expected}")));
        }
        Ok(())
    }

    /// `2 5 0 3` or `-1 9`.
    fn spaced(&mut self) -> Result<i64, FormatError> {
        let start = self.pos;
        let negative = self.eat("-");
        let mut digits = String::new();
        loop {
            let d = self
                .peek_digit(0)
                .ok_or_else(|| self.error_at(self.pos, "expected a digit"))?;
            if self.peek_digit(1).is_some() {
                return Err(self.error_at(self.pos, "spaced digits must be separated"));
            }
            digits.push(char::from(b'0' + d));
            self.pos += 1;
            if self.rest().starts_with(' ') && self.peek_digit(1).is_some() {
                self.pos += 1;
            } else {
                break;
            }
        }
        if digits.len() > 6 {
            return Err(self.error_at(start, "integer too long"));
        }
        if digits.len() > 1 && digits.starts_with('0') {
            return Err(self.error_at(start, "leading zero"));
        }
        let magnitude: i64 = digits.parse().expect("ascii digits");
        if negative && magnitude == 0 {
            return Err(self.error_at(start, "negative zero"));
        }
        Ok(if negative { -magnitude } else { magnitude })
    }

    fn spaced_of(&mut self, expected: i64) -> Result<(), FormatError> {
        let at = self.pos;
        if self.spaced()? != expected {
            return Err(self.error_at(at, format!("spaced digits do not equal {expected}")));
        }
        Ok(())
    }
}
