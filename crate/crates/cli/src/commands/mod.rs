//! One module per subcommand, sharing the resolved global options.

pub mod eval;
pub mod generate;
pub mod remote;
pub mod report;
pub mod saliency;
pub mod train;

use placevalue::datagen::{load_test_set, TestCase, TestSetFormat};
use placevalue::format::Operation;
use placevalue::DType;

use crate::layout::{require, Layout};
use crate::settings::Settings;
use crate::{Cli, Command};

pub const DEFAULT_SEED: u64 = 7;

pub struct Context {
    pub settings: Settings,
    pub seed: u64,
    pub layout: Layout,
    pub precision: DType,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.get("seed", cli.seed, DEFAULT_SEED)?;
    let out = settings.get_path("out", cli.out, "runs")?;
    let precision = settings.get("precision", cli.precision, DType::F32)?;
    let mut ctx = Context {
        settings,
        seed,
        layout: Layout::new(out),
        precision,
    };
    match cli.command {
        Command::Generate(args) => generate::run(&mut ctx, args),
        Command::Train(args) => train::run(&mut ctx, args),
        Command::Eval(args) => eval::run(&mut ctx, args),
        Command::Saliency(args) => saliency::run(&mut ctx, args),
        Command::Remote(args) => remote::run(&mut ctx, args),
        Command::Report(args) => report::run(&mut ctx, args),
    }
}

/// `[one]` when given, otherwise every value.
pub fn select<T: Copy>(one: Option<T>, all: &[T]) -> Vec<T> {
    match one {
        Some(v) => vec![v],
        None => all.to_vec(),
    }
}

/// The generated test set of `op`.
pub fn load_op_test_set(layout: &Layout, op: Operation) -> anyhow::Result<Vec<TestCase>> {
    let path = layout.test_set(op);
    require(&path, format!("placevalue generate --op {op}"))?;
    let set = load_test_set(&path, TestSetFormat::Native)?;
    Ok(set.cases)
}
