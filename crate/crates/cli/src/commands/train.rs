//! `train`: fits a tokenizer and a model to one training set per requested
//! operation and approach.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use placevalue::datagen::{read_dataset, TestCase};
use placevalue::eval::{evaluate, score_tasks, GreedyDecoder};
use placevalue::format::{Approach, Operation};
use placevalue::model::{AnyCheckpoint, Checkpoint, Model, ModelConfig};
use placevalue::tokenizer::Tokenizer;
use placevalue::train::{
    encode_dataset, epoch_means, loss_log_csv, train, LossRecord, LrSchedule, TrainConfig,
    TrainError, TrainObserver,
};
use placevalue::{DType, Scalar};

use super::{select, Context};
use crate::error::Usage;
use crate::layout::{create_dir, require, CHECKPOINT_FILE, TOKENIZER_FILE};

pub const DEFAULT_VOCAB_SIZE: usize = 400;
/// Test cases scored by the periodic evaluation during training.
const EVAL_SAMPLE: usize = 50;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Operation: add, sub or mul.
    #[arg(long, conflicts_with = "all")]
    pub op: Option<Operation>,
    /// Approach: baseline, spaced or decomposition.
    #[arg(long, conflicts_with = "all")]
    pub approach: Option<Approach>,
    /// Train all 9 operation and approach combinations.
    #[arg(long)]
    pub all: bool,
    /// Training set to use instead of the generated one.
    #[arg(long, conflicts_with = "all")]
    pub data: Option<PathBuf>,
    /// Only the first N lines of the training set.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Continue from the checkpoint in the model directory.
    #[arg(long)]
    pub resume: bool,
    /// [default: 25]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// constant or linear-decay [default: constant].
    #[arg(long)]
    pub schedule: Option<LrSchedule>,
    /// Clip the global gradient norm to this value [default: off].
    #[arg(long)]
    pub clip: Option<f64>,
    /// Target tokenizer vocabulary, specials included [default: 400].
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub layers: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    pub d_model: Option<usize>,
    /// [default: 512]
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// [default: 256]
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Score a sample of the test set every N steps [default: 0, off].
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Save the checkpoint every N steps [default: 0, only at the end].
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

struct Resolved {
    limit: Option<usize>,
    resume: bool,
    vocab_size: usize,
    model: ModelConfig,
    train: TrainConfig,
}

fn resolve(ctx: &mut Context, args: &Args) -> anyhow::Result<Resolved> {
    let s = &mut ctx.settings;
    let defaults = ModelConfig::desk_default(0);
    let base = TrainConfig::default();
    let model = ModelConfig {
        n_layers: s.get("layers", args.layers, defaults.n_layers)?,
        n_heads: s.get("heads", args.heads, defaults.n_heads)?,
        d_model: s.get("d_model", args.d_model, defaults.d_model)?,
        d_ff: s.get("d_ff", args.d_ff, defaults.d_ff)?,
        max_seq_len: s.get("max_seq_len", args.max_seq_len, defaults.max_seq_len)?,
        vocab_size: 0,
        dropout: s.get("dropout", args.dropout, defaults.dropout)?,
    };
    let train = TrainConfig {
        epochs: s.get("epochs", args.epochs, base.epochs)?,
        learning_rate: s.get("lr", args.lr, base.learning_rate)?,
        batch_size: s.get("batch_size", args.batch_size, base.batch_size)?,
        seed: ctx.seed,
        eval_every: s.get("eval_every", args.eval_every, 0)?,
        checkpoint_every: s.get("checkpoint_every", args.checkpoint_every, 0)?,
        schedule: s.get("schedule", args.schedule, base.schedule)?,
        clip_grad_norm: s.get_opt("clip", args.clip)?,
        ..base
    };
    train.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(Resolved {
        limit: s.get_opt("limit", args.limit)?,
        resume: s.get_flag("resume", args.resume)?,
        vocab_size: s.get("vocab_size", args.vocab_size, DEFAULT_VOCAB_SIZE)?,
        model,
        train,
    })
}

pub fn run(ctx: &mut Context, args: Args) -> anyhow::Result<()> {
    let cfg = resolve(ctx, &args)?;
    let op = ctx.settings.get_opt("op", args.op)?;
    let approach = ctx.settings.get_opt("approach", args.approach)?;
    if args.data.is_some() && (op.is_none() || approach.is_none()) {
        return Err(Usage("--data needs --op and --approach".into()).into());
    }
    for op in select(op, &Operation::ALL) {
        for approach in select(approach, &Approach::ALL) {
            let data = match &args.data {
                Some(p) => p.clone(),
                None => ctx.layout.dataset(op, approach),
            };
            ctx.settings.record("op", op);
            ctx.settings.record("approach", approach);
            ctx.settings.record("data", data.display());
            let dir = ctx.layout.model_dir(op, approach);
            let test_file = ctx.layout.test_set(op);
            let test = if test_file.exists() {
                super::load_op_test_set(&ctx.layout, op)?
            } else {
                Vec::new()
            };
            match ctx.precision {
                DType::F32 => train_one::<f32>(&cfg, op, approach, &data, &dir, &test)?,
                DType::F64 => train_one::<f64>(&cfg, op, approach, &data, &dir, &test)?,
            }
            ctx.settings.write_manifest(&dir, "train")?;
        }
    }
    Ok(())
}

struct Progress<'a> {
    label: String,
    per_epoch: u64,
    started: Instant,
    dir: &'a Path,
    tokenizer: &'a Tokenizer,
    sample: &'a [TestCase],
    approach: Approach,
    epoch_loss: (f64, usize),
}

impl<S: Scalar> TrainObserver<S> for Progress<'_> {
    fn on_step(&mut self, record: &LossRecord) {
        self.epoch_loss.0 += record.loss;
        self.epoch_loss.1 += 1;
        if record.step % self.per_epoch == 0 {
            log::info!(
                "{}: epoch {} mean loss {:.4} ({:.0}s)",
                self.label,
                record.epoch,
                self.epoch_loss.0 / self.epoch_loss.1 as f64,
                self.started.elapsed().as_secs_f64()
            );
            self.epoch_loss = (0.0, 0);
        }
    }

    fn on_eval(&mut self, checkpoint: &Checkpoint<S>) -> Result<(), TrainError> {
        if self.sample.is_empty() {
            return Ok(());
        }
        let decoder = GreedyDecoder::new(&checkpoint.model, self.tokenizer);
        let results = evaluate(&decoder, self.sample, self.approach)
            .map_err(|e| TrainError::Observer(e.to_string()))?;
        let correct = results.iter().filter(|r| r.correct).count();
        log::info!(
            "{}: step {} sample accuracy {correct}/{} {:?}",
            self.label,
            checkpoint.step,
            results.len(),
            score_tasks(&results)
        );
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint<S>) -> Result<(), TrainError> {
        checkpoint.save(&self.dir.join(CHECKPOINT_FILE))?;
        Ok(())
    }
}

fn train_one<S: Scalar>(
    cfg: &Resolved,
    op: Operation,
    approach: Approach,
    data: &Path,
    dir: &Path,
    test: &[TestCase],
) -> anyhow::Result<()> {
    let label = format!("{op}-{approach}");
    require(
        data,
        format!("placevalue generate --op {op} --approach {approach}"),
    )?;
    let mut lines = read_dataset(data)?;
    if let Some(n) = cfg.limit {
        lines.truncate(n);
    }
    create_dir(dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let tok_path = dir.join(TOKENIZER_FILE);

    let (tokenizer, mut checkpoint) = if cfg.resume && ckpt_path.exists() {
        let tokenizer = Tokenizer::load(&tok_path)?;
        let loaded = AnyCheckpoint::load(&ckpt_path)?;
        let checkpoint: Checkpoint<S> = match loaded {
            AnyCheckpoint::F32(c) => c.convert(),
            AnyCheckpoint::F64(c) => c.convert(),
        };
        log::info!("{label}: resuming at step {}", checkpoint.step);
        (tokenizer, checkpoint)
    } else {
        let tokenizer = Tokenizer::train(&lines, cfg.vocab_size)?;
        tokenizer.save(&tok_path)?;
        let model_cfg = ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            ..cfg.model
        };
        model_cfg.validate().map_err(|e| Usage(e.to_string()))?;
        let model = Model::<S>::init(model_cfg, cfg.train.seed)?;
        (tokenizer, Checkpoint::new(model, cfg.train.seed))
    };
    let encoded = encode_dataset(&lines, &tokenizer, checkpoint.model.config().max_seq_len)?;
    let sample: Vec<TestCase> = test.iter().take(EVAL_SAMPLE).cloned().collect();
    let mut progress = Progress {
        label: label.clone(),
        per_epoch: cfg.train.steps_per_epoch(encoded.len()),
        started: Instant::now(),
        dir,
        tokenizer: &tokenizer,
        sample: &sample,
        approach,
        epoch_loss: (0.0, 0),
    };
    log::info!(
        "{label}: {} observations, vocabulary {}, {} parameters",
        encoded.len(),
        tokenizer.vocab_size(),
        checkpoint.model.config().parameter_count()
    );
    let records = train(&mut checkpoint, &encoded, &cfg.train, &mut progress)?;
    checkpoint.save(&ckpt_path)?;

    let loss_path = dir.join("loss.csv");
    let csv = loss_log_csv(&records);
    if cfg.resume && loss_path.exists() {
        let mut text = std::fs::read_to_string(&loss_path)
            .with_context(|| format!("reading {}", loss_path.display()))?;
        text.push_str(csv.split_once('\n').map_or("", |(_, rows)| rows));
        std::fs::write(&loss_path, text)
    } else {
        std::fs::write(&loss_path, csv)
    }
    .with_context(|| format!("writing {}", loss_path.display()))?;

    let means = epoch_means(&records);
    match (means.first(), means.last()) {
        (Some(first), Some(last)) => println!(
            "{label}: {} steps, epoch {} loss {:.4} -> epoch {} loss {:.4}",
            checkpoint.step, first.0, first.1, last.0, last.1
        ),
        _ => println!("{label}: already trained ({} steps)", checkpoint.step),
    }
    Ok(())
}
