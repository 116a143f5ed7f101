//! Per-token saliency panels rendered as text and static HTML, and the
//! place-digit probe used to check which digits a model attends to.

use std::fmt::Write as _;

use super::report::html_escape;
use super::EvalError;
use crate::format::{
    decompose, prompt_prefix, render_observation, Approach, DigitOrder, Operation,
};
use crate::model::{saliency_scores, Model};
use crate::scalar::Scalar;
use crate::tokenizer::{Tokenizer, BOS};

/// Saliency of every token preceding one target token.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyPanel {
    /// Index of the target in the full id sequence (which starts with `BOS`).
    pub position: usize,
    pub target: String,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyReport {
    pub text: String,
    pub panels: Vec<SaliencyPanel>,
}

/// `BOS` followed by the encoded text, as seen during training.
pub fn teacher_forced_ids(tokenizer: &Tokenizer, text: &str) -> Result<Vec<u32>, EvalError> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer.encode(text)?);
    Ok(ids)
}

fn token_label(tokenizer: &Tokenizer, id: u32) -> String {
    if id == BOS {
        return "<bos>".to_string();
    }
    tokenizer.token_text(id).unwrap_or("?").to_string()
}

/// One panel per requested position of `ids`.
pub fn saliency_report<S: Scalar>(
    model: &Model<S>,
    tokenizer: &Tokenizer,
    ids: &[u32],
    positions: &[usize],
) -> Result<SaliencyReport, EvalError> {
    let mut panels = Vec::with_capacity(positions.len());
    for &position in positions {
        let scores = saliency_scores(model, ids, position)?;
        panels.push(SaliencyPanel {
            position,
            target: token_label(tokenizer, ids[position]),
            tokens: ids[..position]
                .iter()
                .map(|&id| token_label(tokenizer, id))
                .collect(),
            scores,
        });
    }
    Ok(SaliencyReport {
        text: tokenizer.decode(ids)?,
        panels,
    })
}

const SHADES: [char; 5] = [' ', '░', '▒', '▓', '█'];

impl SaliencyReport {
    /// Aligned columns: token, score to six decimals and a bar whose shade
    /// and length follow the score relative to the panel maximum.
    pub fn render_text(&self) -> String {
        let mut out = format!("text: {}\n", self.text);
        for p in &self.panels {
            let _ = writeln!(
                out,
                "\n== target {:?} at position {} ==",
                p.target, p.position
            );
            let width = p
                .tokens
                .iter()
                .map(|t| t.chars().count() + 2)
                .max()
                .unwrap_or(2);
            let max = p.scores.iter().copied().fold(0.0, f64::max);
            for (tok, &s) in p.tokens.iter().zip(&p.scores) {
                let rel = if max > 0.0 { s / max } else { 0.0 };
                let shade = SHADES[((rel * 4.0).round() as usize).min(4)];
                let bar: String =
                    std::iter::repeat_n(shade, (rel * 30.0).round() as usize).collect();
                let _ = writeln!(out, "{:<width$} {s:.6} {bar}", format!("{tok:?}"));
            }
            let _ = writeln!(out, "{:<width$} <- target", format!("{:?}", p.target));
        }
        out
    }

    /// Static page with one row of shaded tokens per panel; the target token
    /// is outlined.
    pub fn render_html(&self) -> String {
        let mut out = String::from(
            "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Input saliency</title>\n\
             <style>body{font-family:monospace}span{white-space:pre;padding:2px 1px;margin:1px;display:inline-block}\
             .target{outline:2px solid #c00}</style>\n</head>\n<body>\n",
        );
        let _ = writeln!(out, "<p>{}</p>", html_escape(&self.text));
        for p in &self.panels {
            let _ = writeln!(
                out,
                "<h3>target {} at position {}</h3>\n<div>",
                html_escape(&format!("{:?}", p.target)),
                p.position
            );
            let max = p.scores.iter().copied().fold(0.0, f64::max);
            for (tok, &s) in p.tokens.iter().zip(&p.scores) {
                let alpha = if max > 0.0 { s / max } else { 0.0 };
                let _ = write!(
                    out,
                    "<span title=\"{s:.6}\" style=\"background:rgba(0,90,200,{alpha:.3})\">{}</span>",
                    html_escape(tok)
                );
            }
            let _ = writeln!(
                out,
                "<span class=\"target\">{}</span>\n</div>",
                html_escape(&p.target)
            );
        }
        out.push_str("</body>\n</html>\n");
        out
    }
}

/// Which operand occurrences of one place value ended up among the most
/// salient digit tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    /// Position of the result digit whose saliency was taken.
    pub position: usize,
    /// Positions of the `top_k` most salient digit tokens, most salient first.
    pub top: Vec<usize>,
    pub first_operand_hit: bool,
    pub second_operand_hit: bool,
}

impl ProbeOutcome {
    pub fn both_hit(&self) -> bool {
        self.first_operand_hit && self.second_operand_hit
    }
}

/// Char offset of the digit of `place` inside an ascending decomposition.
fn place_offset(decomposition: &str, place: usize) -> Option<usize> {
    let body_start = if decomposition.starts_with("minus ") {
        6
    } else {
        0
    };
    let mut offset = body_start;
    for (i, term) in decomposition[body_start..].split(", ").enumerate() {
        if i == place {
            return Some(offset);
        }
        offset += term.len() + 2;
    }
    None
}

/// Index of the token covering byte `offset` of the text, counting `BOS` as 0.
fn token_at(tokenizer: &Tokenizer, ids: &[u32], offset: usize) -> Option<usize> {
    let mut pos = 0;
    for (i, &id) in ids.iter().enumerate().skip(1) {
        let len = tokenizer.token_text(id)?.len();
        if offset < pos + len {
            return Some(i);
        }
        pos += len;
    }
    None
}

/// Teacher-forces the decomposition observation of `(n1, op, n2)` and takes
/// the saliency of the digit of `place` in the result of the worked
/// computation line. The digit tokens before it are ranked by saliency; an
/// operand counts as hit when one of its own `place` digits (from its
/// translation line or from the computation line) is among the `top_k`.
///
/// Returns `None` when an operand or the result has no digit at `place`.
pub fn place_digit_probe<S: Scalar>(
    model: &Model<S>,
    tokenizer: &Tokenizer,
    n1: i64,
    n2: i64,
    op: Operation,
    place: usize,
    top_k: usize,
) -> Result<Option<ProbeOutcome>, EvalError> {
    let obs = render_observation(n1, n2, op, Approach::Decomposition)?;
    let asc = DigitOrder::Ascending;
    let (d1, d2, dr) = (
        decompose(n1, asc)?,
        decompose(n2, asc)?,
        decompose(obs.result, asc)?,
    );
    let tr = "Translate from number to decomposition: ";
    let mut text = prompt_prefix(n1, n2, op, Approach::Decomposition)?;
    let mut starts = Vec::new();
    text.push_str(&format!(" {tr}{n1} = "));
    starts.push((0, text.len()));
    text.push_str(&format!("{d1}. {tr}{n2} = "));
    starts.push((1, text.len()));
    text.push_str(&format!("{d2}. {} ", op.verb()));
    starts.push((0, text.len()));
    text.push_str(&format!("{d1} {} ", op.symbol()));
    starts.push((1, text.len()));
    text.push_str(&format!("{d2} = "));
    let result_start = text.len();
    debug_assert!(obs.text.starts_with(&text));

    let Some(result_offset) = place_offset(&dr, place) else {
        return Ok(None);
    };
    let ids = teacher_forced_ids(tokenizer, &obs.text)?;
    let target = token_at(tokenizer, &ids, result_start + result_offset)
        .ok_or_else(|| EvalError::Prompt(obs.text.clone()))?;
    let mut operand_tokens: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (operand, start) in starts {
        let d = if operand == 0 { &d1 } else { &d2 };
        let Some(off) = place_offset(d, place) else {
            return Ok(None);
        };
        if let Some(t) = token_at(tokenizer, &ids, start + off) {
            operand_tokens[operand].push(t);
        }
    }

    let scores = saliency_scores(model, &ids, target)?;
    let mut digits: Vec<usize> = (0..target)
        .filter(|&i| tokenizer.is_digit_token(ids[i]))
        .collect();
    // Stable sort keeps earlier tokens first among equal scores.
    digits.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    digits.truncate(top_k);
    Ok(Some(ProbeOutcome {
        position: target,
        first_operand_hit: operand_tokens[0].iter().any(|t| digits.contains(t)),
        second_operand_hit: operand_tokens[1].iter().any(|t| digits.contains(t)),
        top: digits,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (Model<f64>, Tokenizer) {
        let corpus: Vec<String> = [(12, 34), (56, 78), (90, 5)]
            .iter()
            .map(|&(a, b)| {
                render_observation(a, b, Operation::Add, Approach::Decomposition)
                    .unwrap()
                    .text
            })
            .collect();
        let tok = Tokenizer::train(&corpus, 80).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 128,
            vocab_size: tok.vocab_size(),
            dropout: 0.0,
        };
        (Model::init(cfg, 3).unwrap(), tok)
    }

    #[test]
    fn report_passes_scores_through() {
        let (model, tok) = setup();
        let ids = teacher_forced_ids(&tok, "Compute with pipeline 12 plus 34.").unwrap();
        let report = saliency_report(&model, &tok, &ids, &[3, ids.len() - 1]).unwrap();
        for p in &report.panels {
            assert_eq!(p.tokens.len(), p.position);
            let direct = saliency_scores(&model, &ids, p.position).unwrap();
            for (a, b) in p.scores.iter().zip(&direct) {
                assert_eq!(format!("{a:.6}"), format!("{b:.6}"));
            }
        }
        let text = report.render_text();
        assert!(text.contains("<- target"));
        assert!(report.render_html().contains("class=\"target\""));
    }

    #[test]
    fn probe_targets_the_result_units_digit() {
        let (model, tok) = setup();
        let out = place_digit_probe(&model, &tok, 12, 34, Operation::Add, 0, 3)
            .unwrap()
            .unwrap();
        let ids = teacher_forced_ids(
            &tok,
            &render_observation(12, 34, Operation::Add, Approach::Decomposition)
                .unwrap()
                .text,
        )
        .unwrap();
        let before = tok.decode(&ids[..out.position]).unwrap();
        assert!(
            before
                .trim_end()
                .ends_with("Sum 2 units, 1 tens + 4 units, 3 tens ="),
            "{before}"
        );
        assert!(tok
            .decode(&ids[out.position..=out.position])
            .unwrap()
            .contains('6'));
        assert_eq!(out.top.len(), 3);
        // Tens of a one-digit operand does not exist.
        assert!(place_digit_probe(&model, &tok, 9, 34, Operation::Add, 1, 3)
            .unwrap()
            .is_none());
    }

    #[test]
    fn place_offsets() {
        assert_eq!(place_offset("8 units, 6 tens, 8 hundreds", 0), Some(0));
        assert_eq!(place_offset("8 units, 6 tens, 8 hundreds", 2), Some(17));
        assert_eq!(place_offset("minus 9 units, 1 tens", 1), Some(15));
        assert_eq!(place_offset("0 units", 1), None);
    }
}
