//! `saliency`: per-token saliency panels for the result digits of one
//! observation, and the place-digit probe over many test cases.

use std::fmt::Write as _;

use placevalue::eval::{place_digit_probe, saliency_report, teacher_forced_ids};
use placevalue::format::{decompose, render_observation, Approach, DigitOrder, Operation};
use placevalue::model::{AnyCheckpoint, Model};
use placevalue::tokenizer::Tokenizer;
use placevalue::{DType, Scalar};

use super::eval::write;
use super::Context;
use crate::error::Usage;
use crate::layout::{create_dir, require, CHECKPOINT_FILE, TOKENIZER_FILE};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Operation of the model: add, sub or mul.
    #[arg(long)]
    pub op: Option<Operation>,
    /// Approach of the model [default: decomposition].
    #[arg(long)]
    pub approach: Option<Approach>,
    /// First operand [default: first test case].
    #[arg(long, allow_hyphen_values = true, requires = "n2")]
    pub n1: Option<i64>,
    /// Second operand.
    #[arg(long, allow_hyphen_values = true, requires = "n1")]
    pub n2: Option<i64>,
    /// Run the place-digit probe over the first N test cases.
    #[arg(long)]
    pub probe: Option<usize>,
    /// Comma-separated digit places for the probe, 0 = units [default: 0].
    #[arg(long)]
    pub places: Option<String>,
    /// Number of most salient digit tokens an operand digit must be among [default: 3].
    #[arg(long)]
    pub top_k: Option<usize>,
}

pub fn run(ctx: &mut Context, args: Args) -> anyhow::Result<()> {
    let s = &mut ctx.settings;
    let op: Operation = s
        .get_opt("op", args.op)?
        .ok_or_else(|| Usage("saliency needs --op".into()))?;
    let approach = s.get("approach", args.approach, Approach::Decomposition)?;
    let n1 = s.get_opt("n1", args.n1)?;
    let n2 = s.get_opt("n2", args.n2)?;
    let probe = s.get_opt("probe", args.probe)?;
    let places = s.get("places", args.places, "0".to_string())?;
    let top_k = s.get("top_k", args.top_k, 3)?;
    let places: Vec<usize> = places
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| {
            Usage(format!(
                "--places expects comma-separated digits, got `{places}`"
            ))
        })?;
    if probe.is_some() && approach != Approach::Decomposition {
        return Err(Usage(
            "the probe reads decomposition observations; use --approach decomposition".into(),
        )
        .into());
    }

    let dir = ctx.layout.model_dir(op, approach);
    let ckpt = dir.join(CHECKPOINT_FILE);
    require(
        &ckpt,
        format!("placevalue train --op {op} --approach {approach}"),
    )?;
    let tokenizer = Tokenizer::load(&dir.join(TOKENIZER_FILE))?;
    let checkpoint = AnyCheckpoint::load(&ckpt)?;
    let test = super::load_op_test_set(&ctx.layout, op)?;
    let (n1, n2) = match (n1, n2) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            let first = test
                .first()
                .ok_or_else(|| Usage(format!("the {op} test set is empty")))?;
            (first.n1, first.n2)
        }
    };
    let job = Job {
        tokenizer: &tokenizer,
        op,
        approach,
        n1,
        n2,
        probe: probe.map(|n| (&test[..n.min(test.len())], places.as_slice(), top_k)),
    };
    let out_dir = ctx.layout.saliency_dir();
    create_dir(&out_dir)?;
    let outputs = match ctx.precision {
        DType::F32 => job.run(&checkpoint.into_f32().model)?,
        DType::F64 => job.run(&checkpoint.into_f64().model)?,
    };
    let stem = format!("{op}-{approach}-{n1}-{n2}");
    write(&out_dir.join(format!("{stem}.txt")), &outputs.text)?;
    write(&out_dir.join(format!("{stem}.html")), &outputs.html)?;
    print!("{}", outputs.text);
    if let Some(csv) = outputs.probe_csv {
        write(&out_dir.join(format!("probe-{op}-{approach}.csv")), &csv)?;
        print!("{csv}");
    }
    ctx.settings
        .write_manifest_as(&out_dir.join(format!("{stem}.manifest")), "saliency")
}

struct Job<'a> {
    tokenizer: &'a Tokenizer,
    op: Operation,
    approach: Approach,
    n1: i64,
    n2: i64,
    probe: Option<(&'a [placevalue::datagen::TestCase], &'a [usize], usize)>,
}

struct Outputs {
    text: String,
    html: String,
    probe_csv: Option<String>,
}

impl Job<'_> {
    fn run<S: Scalar>(&self, model: &Model<S>) -> anyhow::Result<Outputs> {
        let obs = render_observation(self.n1, self.n2, self.op, self.approach)?;
        let ids = teacher_forced_ids(self.tokenizer, &obs.text)?;
        let positions = if self.approach == Approach::Decomposition {
            // One panel per digit of the result in the worked computation.
            let places = decompose(obs.result, DigitOrder::Ascending)?
                .split(", ")
                .count();
            let mut positions = Vec::new();
            for place in 0..places {
                if let Some(p) =
                    place_digit_probe(model, self.tokenizer, self.n1, self.n2, self.op, place, 1)?
                {
                    positions.push(p.position);
                }
            }
            positions
        } else {
            answer_positions(self.tokenizer, &ids, &obs.text, obs.result)
        };
        let report = saliency_report(model, self.tokenizer, &ids, &positions)?;

        let probe_csv = match self.probe {
            Some((cases, places, top_k)) => {
                let mut csv = String::from("place,cases,first_operand,second_operand,both\n");
                for &place in places {
                    let (mut n, mut first, mut second, mut both) = (0, 0, 0, 0);
                    for c in cases {
                        if let Some(o) = place_digit_probe(
                            model,
                            self.tokenizer,
                            c.n1,
                            c.n2,
                            c.op,
                            place,
                            top_k,
                        )? {
                            n += 1;
                            first += usize::from(o.first_operand_hit);
                            second += usize::from(o.second_operand_hit);
                            both += usize::from(o.both_hit());
                        }
                    }
                    let _ = writeln!(csv, "{place},{n},{first},{second},{both}");
                }
                Some(csv)
            }
            None => None,
        };
        Ok(Outputs {
            text: report.render_text(),
            html: report.render_html(),
            probe_csv,
        })
    }
}

/// Positions of the tokens spelling the final answer at the end of `text`.
fn answer_positions(tokenizer: &Tokenizer, ids: &[u32], text: &str, result: i64) -> Vec<usize> {
    let start = text.len() - result.to_string().len();
    let mut offset = 0;
    let mut out = Vec::new();
    for (i, &id) in ids.iter().enumerate().skip(1) {
        let len = tokenizer.token_text(id).map_or(0, str::len);
        if offset + len > start {
            out.push(i);
        }
        offset += len;
    }
    out
}
