//! End-to-end acceptance checks. Each test prints one PASS/FAIL line per
//! criterion to stderr (uncaptured) and then asserts it.
//!
//! The tests share one lock so that time budgets are measured without other
//! tests competing for the CPU.

#[path = "support/mock_server.rs"]
mod mock_server;

use std::collections::HashSet;
use std::io::Write as _;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use placevalue::datagen::{
    exclude_test_pairs, load_test_set, read_dataset, sample_pairs, sample_test_cases,
    write_dataset, write_test_set, Band, SamplingSpec, TestCase, TestSetFormat,
};
use placevalue::eval::{
    evaluate, place_digit_probe, score_tasks, EmptyGenerator, EvalReport, GreedyDecoder,
    OracleGenerator, TASK_COLUMNS,
};
use placevalue::format::{
    build_fewshot_prompt, decompose, extract_answer, parse_observation, recompose,
    render_observation, Approach, DigitOrder, Operation,
};
use placevalue::model::{batch_loss, forward, loss_and_grads, Checkpoint, Model, ModelConfig};
use placevalue::remote::{
    replay_transcript, run_remote_eval, score_entries, HttpClient, PromptStyle, RemoteConfig,
};
use placevalue::tokenizer::Tokenizer;
use placevalue::train::{encode_dataset, train, LrSchedule, Silent, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id:>2} {verdict} {name}: {detail} ({:.1}s)",
        elapsed.as_secs_f64()
    );
}

const EXPECTED_DECOMPOSITION: &str = "Compute with pipeline 1201 plus 1302. Translate from number to decomposition: 1201 = 1 units, 0 tens, 2 hundreds, 1 thousands. Translate from number to decomposition: 1302 = 2 units, 0 tens, 3 hundreds, 1 thousands. Sum 1 units, 0 tens, 2 hundreds, 1 thousands + 2 units, 0 tens, 3 hundreds, 1 thousands = 3 units, 0 tens, 5 hundreds, 2 thousands. Translate from decomposition to number: 3 units, 0 tens, 5 hundreds, 2 thousands = 2503";
const EXPECTED_BASELINE: &str = "Compute 1201 plus 1302. Final result = 2503";
const EXPECTED_SPACED: &str =
    "Compute 1201 plus 1302. 1 2 0 1 plus 1 3 0 2 = 2 5 0 3. Final result = 2503";

const FEWSHOT_PROMPT: &str = "This application makes an arithmetic operation decomposing the input numbers.
###
Compute with pipeline 28 plus 39. Translate from number to decomposition: 28 = 2 tens, 8 units. Translate from number to decomposition: 39 = 3 tens, 9 units. Sum 8 units, 2 tens + 9 units, 3 tens = 7 units, 6 tens. Translate from decomposition to number: 6 tens, 7 units = 67
###
Compute with pipeline 804 plus 121. Translate from number to decomposition: 804 = 8 hundreds, 0 tens, 4 units. Translate from number to decomposition: 121 = 1 hundreds, 2 tens, 1 units. Sum 4 units, 0 tens, 8 hundreds + 1 units, 2 tens, 1 hundreds = 5 units, 2 tens, 9 hundreds. Translate from decomposition to number: 9 hundreds, 2 tens, 5 units = 925
###
Compute with pipeline 1201 plus 1302. Translate from number to decomposition: 1201 = 1 thousands, 2 hundreds, 0 tens, 1 units. Translate from number to decomposition: 1302 = 1 thousands, 3 hundreds, 0 tens, 2 units. Sum 1 units, 0 tens, 2 hundreds, 1 thousands + 2 units, 0 tens, 3 hundreds, 1 thousands = 3 units, 0 tens, 5 hundreds, 2 thousands. Translate from decomposition to number: 2 thousands, 5 hundreds, 0 tens, 3 units = 2503
###
Compute with pipeline 97734 plus 86328. Translate from number to decomposition: 97734 = 9 tens of thousands, 7 thousands, 7 hundreds, 3 tens, 4 units. Translate from number to decomposition: 86328 = 8 tens of thousands, 6 thousands, 3 hundreds, 2 tens, 8 units. Sum 4 units, 3 tens, 7 hundreds, 7 thousands, 9 tens of thousands + 8 units, 2 tens, 3 hundreds, 6 thousands, 8 tens of thousands = 2 units, 6 tens, 0 hundreds, 4 thousands, 8 tens of thousands, 1 hundreds of thousands. Translate from decomposition to number: 1 hundreds of thousands, 8 tens of thousands, 4 thousands, 0 hundreds, 6 tens, 2 units = 184062
###
Compute with pipeline 11151 plus 11623.";

#[test]
fn criterion_01_format_byte_exactness() {
    let _g = serial();
    let t = Instant::now();
    let render = |a| {
        render_observation(1201, 1302, Operation::Add, a)
            .unwrap()
            .text
    };
    let strings_ok = render(Approach::Decomposition) == EXPECTED_DECOMPOSITION
        && render(Approach::Baseline) == EXPECTED_BASELINE
        && render(Approach::Spaced) == EXPECTED_SPACED;
    let prompt_ok = build_fewshot_prompt(11151, 11623, Operation::Add).unwrap() == FEWSHOT_PROMPT;
    let pass = strings_ok && prompt_ok && t.elapsed() < Duration::from_secs(1);
    report(
        1,
        "format byte-exactness",
        pass,
        &format!("table strings {strings_ok}, few-shot prompt {prompt_ok}"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_02_decomposition_round_trip() {
    let _g = serial();
    let t = Instant::now();
    let mut failures = 0u64;
    for n in -999_999i64..=999_999 {
        for order in [DigitOrder::Ascending, DigitOrder::Descending] {
            if recompose(&decompose(n, order).unwrap()) != Ok(n) {
                failures += 1;
            }
        }
    }
    let pass = failures == 0 && t.elapsed() < Duration::from_secs(10);
    report(
        2,
        "decomposition round trip",
        pass,
        &format!("{failures} failures over all |n| < 10^6, both orders"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_03_dataset_protocol() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    for op in Operation::ALL {
        let spec = SamplingSpec::standard(op, 7);
        let digits: Vec<u32> = spec.bands.iter().map(|b| b.digits).collect();
        let test_path = dir.path().join(format!("{op}-test.tsv"));
        write_test_set(&sample_test_cases(op, &digits, 500, 7).unwrap(), &test_path).unwrap();
        let test = load_test_set(&test_path, TestSetFormat::Native)
            .unwrap()
            .cases;
        let forbidden: HashSet<(i64, i64)> = test.iter().map(|c| (c.n1, c.n2)).collect();
        let pairs = exclude_test_pairs(sample_pairs(&spec).unwrap(), &test, &spec).unwrap();
        let expected_lines = if op == Operation::Mul { 3000 } else { 12000 };
        for approach in Approach::ALL {
            let path = dir.path().join(format!("{op}-{approach}.txt"));
            write_dataset(&pairs, &spec, approach, &path).unwrap();
            let lines = read_dataset(&path).unwrap();
            if lines.len() != expected_lines {
                problems.push(format!("{op}-{approach}: {} lines", lines.len()));
            }
            for band in &spec.bands {
                let n = lines
                    .iter()
                    .map(|l| parse_observation(l).unwrap())
                    .filter(|p| placevalue::datagen::digit_band(p.n1, p.n2) == band.digits)
                    .count();
                if n != band.count {
                    problems.push(format!("{op}-{approach}: band {} has {n}", band.digits));
                }
            }
            for (i, line) in lines.iter().enumerate() {
                let p = parse_observation(line).unwrap();
                if forbidden.contains(&(p.n1, p.n2)) {
                    problems.push(format!("{op}-{approach}:{}: test pair", i + 1));
                }
                if extract_answer(line) != Some(op.apply(p.n1, p.n2)) {
                    problems.push(format!("{op}-{approach}:{}: wrong answer", i + 1));
                }
            }
        }
    }
    let pass = problems.is_empty() && t.elapsed() < Duration::from_secs(30);
    let detail = if problems.is_empty() {
        "9 files, exact counts, no test pairs, all answers correct".to_string()
    } else {
        problems
            .iter()
            .take(5)
            .cloned()
            .collect::<Vec<_>>()
            .join("; ")
    };
    report(3, "dataset protocol", pass, &detail, t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_04_gradients_match_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    let vocab = 13;
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        max_seq_len: 8,
        vocab_size: vocab,
        dropout: 0.0,
    };
    let mut model: Model<f64> = Model::init(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // Move every parameter off its structured initial value (unit gains, zero
    // biases) so each one carries signal.
    for x in model.params_mut().as_mut_slice() {
        *x += rng.random_range(-0.1..0.1);
    }
    let h = 1e-5;
    let n = model.params().as_slice().len();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for _ in 0..3 {
        let batch: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                let len = rng.random_range(2..=8);
                (0..len)
                    .map(|_| rng.random_range(1..vocab as u32))
                    .collect()
            })
            .collect();
        let analytic = loss_and_grads(&model, &batch, None).unwrap().grads;
        for i in 0..n {
            let orig = model.params().as_slice()[i];
            model.params_mut().as_mut_slice()[i] = orig + h;
            let lp = batch_loss(&model, &batch).unwrap();
            model.params_mut().as_mut_slice()[i] = orig - h;
            let lm = batch_loss(&model, &batch).unwrap();
            model.params_mut().as_mut_slice()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.as_slice()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if err > worst {
                worst = err;
                worst_at = format!(
                    "{} fd {fd:e} analytic {an:e}",
                    model.params().layout().owner(i)
                );
            }
        }
    }
    let pass = worst < 1e-4 && t.elapsed() < Duration::from_secs(300);
    report(
        4,
        "gradient check",
        pass,
        &format!("{n} parameters x 3 batches, worst relative error {worst:.2e} ({worst_at})"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_05_tokenizer_effect() {
    let _g = serial();
    let t = Instant::now();
    let spec = SamplingSpec::standard(Operation::Add, 7);
    let pairs = sample_pairs(&spec).unwrap();
    let corpus =
        placevalue::datagen::render_dataset_lines(&pairs, Operation::Add, Approach::Baseline)
            .unwrap();
    let tok = Tokenizer::train(&corpus, 400).unwrap();
    let fused = tok.encode("2503").unwrap().len();
    let spaced = tok.encode("2 5 0 3").unwrap().len();
    let lossless = corpus
        .iter()
        .all(|l| tok.decode(&tok.encode(l).unwrap()).unwrap() == *l);
    let pass = fused < spaced && lossless && t.elapsed() < Duration::from_secs(60);
    report(
        5,
        "tokenizer effect",
        pass,
        &format!("\"2503\" -> {fused} tokens, \"2 5 0 3\" -> {spaced} tokens, lossless {lossless}"),
        t.elapsed(),
    );
    assert!(pass);
}

struct Trained {
    model: Model<f32>,
    tokenizer: Tokenizer,
    test: Vec<TestCase>,
    accuracy: f64,
}

/// Trains the default model on 3000 ADD pairs of one digit band and scores it
/// on 200 held-out pairs of the same band.
fn train_band(digits: u32, approach: Approach, cfg: &TrainConfig) -> Trained {
    let op = Operation::Add;
    let test = sample_test_cases(op, &[digits], 200, 1234).unwrap();
    let spec = SamplingSpec {
        op,
        bands: vec![Band {
            digits,
            count: 3000,
        }],
        seed: 7,
    };
    let pairs = exclude_test_pairs(sample_pairs(&spec).unwrap(), &test, &spec).unwrap();
    let lines = placevalue::datagen::render_dataset_lines(&pairs, op, approach).unwrap();
    let tokenizer = Tokenizer::train(&lines, 400).unwrap();
    let data = encode_dataset(&lines, &tokenizer, 256).unwrap();
    let config = ModelConfig::desk_default(tokenizer.vocab_size());
    let mut checkpoint = Checkpoint::new(Model::<f32>::init(config, 7).unwrap(), 7);
    train(&mut checkpoint, &data, cfg, &mut Silent).unwrap();
    let results = evaluate(
        &GreedyDecoder::new(&checkpoint.model, &tokenizer),
        &test,
        approach,
    )
    .unwrap();
    let correct = results.iter().filter(|r| r.correct).count();
    Trained {
        model: checkpoint.model,
        tokenizer,
        test,
        accuracy: 100.0 * correct as f64 / results.len() as f64,
    }
}

#[test]
fn criteria_06_and_08_two_digit_decomposition_model() {
    let _g = serial();
    let t = Instant::now();
    // 25 epochs, lr 1e-4, batch 32, Adam.
    let recipe = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    let trained = train_band(2, Approach::Decomposition, &recipe);
    let pass6 = trained.accuracy >= 90.0 && t.elapsed() <= Duration::from_secs(30 * 60);
    report(
        6,
        "learnability (2-digit addition, decomposition)",
        pass6,
        &format!("{:.2}% exact match on 200 held-out pairs", trained.accuracy),
        t.elapsed(),
    );

    let t = Instant::now();
    let (mut cases, mut hits) = (0, 0);
    for c in trained.test.iter().take(100) {
        if let Some(o) =
            place_digit_probe(&trained.model, &trained.tokenizer, c.n1, c.n2, c.op, 0, 3).unwrap()
        {
            cases += 1;
            hits += usize::from(o.both_hit());
        }
    }
    let rate = 100.0 * hits as f64 / cases as f64;
    let pass8 = cases >= 100 && rate > 50.0 && t.elapsed() < Duration::from_secs(600);
    report(
        8,
        "saliency tendency (units digits)",
        pass8,
        &format!("both operand units digits in top 3 for {hits}/{cases} prompts ({rate:.1}%)"),
        t.elapsed(),
    );
    assert!(pass6 && pass8);
}

#[test]
fn criterion_07_decomposition_beats_baseline_on_five_digits() {
    let _g = serial();
    let t = Instant::now();
    // The same budget for both formats. A randomly initialized model needs a
    // larger step than the fine-tuning rate of 1e-4 to get anywhere on five
    // digits within 25 epochs.
    let budget = TrainConfig {
        seed: 7,
        learning_rate: 1e-3,
        schedule: LrSchedule::LinearDecay,
        clip_grad_norm: Some(1.0),
        ..TrainConfig::default()
    };
    let decomposition = train_band(5, Approach::Decomposition, &budget).accuracy;
    let baseline = train_band(5, Approach::Baseline, &budget).accuracy;
    let gap = decomposition - baseline;
    let pass = gap >= 20.0 && t.elapsed() <= Duration::from_secs(2 * 3600);
    report(
        7,
        "5-digit addition, decomposition vs baseline",
        pass,
        &format!("decomposition {decomposition:.2}%, baseline {baseline:.2}%, gap {gap:.2} points"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_09_evaluation_rule_fidelity() {
    let _g = serial();
    let t = Instant::now();
    let mut cases = Vec::new();
    for op in Operation::ALL {
        let digits: Vec<u32> = SamplingSpec::standard(op, 3)
            .bands
            .iter()
            .map(|b| b.digits)
            .collect();
        cases.push((op, sample_test_cases(op, &digits, 50, 3).unwrap()));
    }
    let mut oracle = EvalReport::new();
    let mut empty = EvalReport::new();
    for approach in Approach::ALL {
        for (_, c) in &cases {
            let r = evaluate(&OracleGenerator { approach }, c, approach).unwrap();
            oracle.record(approach.name(), &score_tasks(&r));
            let r = evaluate(&EmptyGenerator, c, approach).unwrap();
            empty.record(approach.name(), &score_tasks(&r));
        }
    }
    let all_equal = |report: &EvalReport, want: &str| {
        report.rows.len() == 3
            && report.rows.iter().all(|row| {
                TASK_COLUMNS.iter().all(|task| {
                    report
                        .cell(&row.name, task)
                        .map(|c| c.to_string())
                        .as_deref()
                        == Some(want)
                })
            })
    };
    let oracle_ok = all_equal(&oracle, "100.00");
    let empty_ok = all_equal(&empty, "0.00");

    // Greedy decoding with an untrained model: two runs must agree bit for bit.
    let mut corpus = Vec::new();
    for (op, c) in &cases {
        for case in c.iter().take(5) {
            corpus.push(
                render_observation(case.n1, case.n2, *op, Approach::Decomposition)
                    .unwrap()
                    .text,
            );
        }
    }
    let tok = Tokenizer::train(&corpus, 120).unwrap();
    let cfg = ModelConfig {
        max_seq_len: 64,
        ..ModelConfig::desk_default(tok.vocab_size())
    };
    let model: Model<f32> = Model::init(cfg, 5).unwrap();
    let mut decoder = GreedyDecoder::new(&model, &tok);
    decoder.max_new_tokens = 24;
    let sample: Vec<TestCase> = cases
        .iter()
        .flat_map(|(_, c)| c.iter().take(10).cloned())
        .collect();
    let first = evaluate(&decoder, &sample, Approach::Decomposition).unwrap();
    let second = evaluate(&decoder, &sample, Approach::Decomposition).unwrap();
    let ids = tok.encode_sequence(&corpus[0]).unwrap();
    let ids = &ids[..ids.len().min(64)];
    let bits = |l: Vec<f32>| l.into_iter().map(f32::to_bits).collect::<Vec<_>>();
    let deterministic = first == second
        && bits(forward(&model, ids).unwrap()) == bits(forward(&model, ids).unwrap());

    let pass = oracle_ok && empty_ok && deterministic && t.elapsed() < Duration::from_secs(60);
    report(
        9,
        "evaluation rule fidelity",
        pass,
        &format!("oracle all 100.00 {oracle_ok}, empty all 0.00 {empty_ok}, greedy deterministic {deterministic}"),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_10_remote_client_contract() {
    let _g = serial();
    let t = Instant::now();
    let server = mock_server::start(|body| {
        // Answers correctly for even first operands, off by one otherwise.
        let prompt = body["prompt"].as_str().unwrap();
        let words: Vec<&str> = prompt
            .lines()
            .last()
            .unwrap()
            .trim_end_matches('.')
            .split(' ')
            .collect();
        let (a, b): (i64, i64) = (words[3].parse().unwrap(), words[5].parse().unwrap());
        let answer = if a % 2 == 0 { a + b } else { a + b + 1 };
        (
            200,
            mock_server::completion_body(&format!(" Translate ... = {answer}\n###\nCompute")),
        )
    });
    let mut cases = sample_test_cases(Operation::Add, &[2, 3], 150, 9).unwrap();
    cases.extend(sample_test_cases(Operation::Sub, &[4], 30, 9).unwrap());
    let cfg = RemoteConfig {
        token_env: None,
        ..RemoteConfig::new(server.url.clone(), PromptStyle::DecompositionFewshot)
    };
    let client = HttpClient::new(&cfg).unwrap();
    let mut transcript = Vec::new();
    let entries = run_remote_eval(&client, &cfg, &cases, &mut transcript).unwrap();

    let received = server.received.lock().unwrap().clone();
    let expected_prompts: Vec<String> = cases[..100]
        .iter()
        .chain(&cases[150..250])
        .chain(&cases[300..])
        .map(|c| build_fewshot_prompt(c.n1, c.n2, c.op).unwrap())
        .collect();
    let sent: Vec<String> = received
        .iter()
        .map(|r| r.body["prompt"].as_str().unwrap().to_string())
        .collect();
    let prompts_ok = sent == expected_prompts;
    let cap_ok = received.len() == 230 && entries.len() == 230;

    let live = {
        let mut r = EvalReport::new();
        r.record("decomposition-fewshot", &score_entries(&entries));
        r
    };
    drop(server);
    let replayed = replay_transcript(
        std::str::from_utf8(&transcript).unwrap(),
        &cfg.response_path,
    )
    .unwrap();
    let offline = {
        let mut r = EvalReport::new();
        r.record("decomposition-fewshot", &score_entries(&replayed));
        r
    };
    let replay_ok = replayed == entries && offline == live && live.to_csv() == offline.to_csv();

    let pass = prompts_ok && cap_ok && replay_ok && t.elapsed() < Duration::from_secs(60);
    report(
        10,
        "remote client contract",
        pass,
        &format!(
            "prompts byte-identical {prompts_ok}, {} requests for 330 cases (cap {cap_ok}), replay identical {replay_ok}",
            received.len()
        ),
        t.elapsed(),
    );
    assert!(pass);
}
