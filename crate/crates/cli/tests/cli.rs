#[path = "../../core/tests/support/mock_server.rs"]
mod mock_server;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use placevalue::format::{parse_observation, Approach, Operation};

const BIN: &str = env!("CARGO_BIN_EXE_placevalue");

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("PLACEVALUE_API_KEY")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Small datasets so every step finishes in seconds.
fn generate_small(out: &Path) {
    ok(
        out,
        &[
            "generate",
            "--all",
            "--bands",
            "2:60,3:20",
            "--test-per-band",
            "10",
            "--seed",
            "3",
        ],
    );
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.is_file()
                && !p
                    .file_name()
                    .unwrap()
                    .to_string_lossy()
                    .starts_with("manifest")
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn generate_all_writes_nine_sets_and_repeats_exactly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(dir, &["generate", "--all", "--seed", "7"]);
    }
    let files = tree(&a.path().join("data"));
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".txt")).count(), 9);
    assert_eq!(
        files.iter().filter(|(n, _)| n.ends_with(".meta")).count(),
        9
    );
    // Manifests differ only in the output root.
    assert!(
        files == tree(&b.path().join("data")),
        "generated files differ"
    );

    let text = fs::read_to_string(a.path().join("data/add-decomposition.txt")).unwrap();
    assert_eq!(text.lines().count(), 12000);
    let first = parse_observation(text.lines().next().unwrap()).unwrap();
    assert_eq!(
        (first.op, first.approach),
        (Operation::Add, Approach::Decomposition)
    );
    let mul = fs::read_to_string(a.path().join("data/mul-baseline.txt")).unwrap();
    assert_eq!(mul.lines().count(), 3000);
}

#[test]
fn fixtures_score_full_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let full = ok(dir.path(), &["eval", "--matrix", "--fixture", "oracle"]);
    let csv = fs::read_to_string(dir.path().join("eval/oracle-matrix/report.csv")).unwrap();
    assert!(csv.starts_with("Approach,2D+,3D+,4D+,5D+,2D-,3D-,4D-,5D-,2Dx\n"));
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').skip(1).collect();
        // Only bands 2 and 3 were generated.
        assert_eq!(
            cells,
            ["100.00", "100.00", "", "", "100.00", "100.00", "", "", "100.00"]
        );
    }
    assert!(full.contains("decomposition"));
    ok(
        dir.path(),
        &[
            "eval",
            "--fixture",
            "empty",
            "--op",
            "sub",
            "--approach",
            "spaced",
        ],
    );
    let csv = fs::read_to_string(dir.path().join("eval/empty-sub-spaced/report.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "spaced,,,,,0.00,0.00,,,");
}

#[test]
fn train_eval_saliency_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d);
    let tiny = [
        "--layers",
        "1",
        "--heads",
        "2",
        "--d-model",
        "16",
        "--d-ff",
        "32",
        "--vocab-size",
        "150",
        "--batch-size",
        "8",
        "--lr",
        "0.003",
    ];
    let mut args = vec![
        "train",
        "--op",
        "add",
        "--approach",
        "decomposition",
        "--epochs",
        "1",
    ];
    args.extend(tiny);
    let stdout = ok(d, &args);
    assert!(stdout.contains("add-decomposition: 10 steps"), "{stdout}");
    let model_dir = d.join("models/add-decomposition");
    for f in ["model.ckpt", "tokenizer.txt", "loss.csv", "manifest.txt"] {
        assert!(model_dir.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(model_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("epochs = 1\n") && manifest.contains("d_model = 16\n"));

    // Resuming to 2 epochs continues from step 10.
    let mut args = vec![
        "train",
        "--op",
        "add",
        "--approach",
        "decomposition",
        "--epochs",
        "2",
        "--resume",
    ];
    args.extend(tiny);
    let stdout = ok(d, &args);
    assert!(stdout.contains("20 steps"), "{stdout}");
    let loss = fs::read_to_string(model_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);

    let report = ok(
        d,
        &[
            "eval",
            "--op",
            "add",
            "--approach",
            "decomposition",
            "--max-new-tokens",
            "8",
        ],
    );
    assert!(report.starts_with("Approach"));
    let again = ok(
        d,
        &[
            "eval",
            "--op",
            "add",
            "--approach",
            "decomposition",
            "--max-new-tokens",
            "8",
        ],
    );
    assert_eq!(report, again);
    assert!(d
        .join("eval/add-decomposition/failures-add-decomposition.jsonl")
        .exists());

    let text = ok(
        d,
        &[
            "saliency", "--op", "add", "--n1", "12", "--n2", "34", "--probe", "5",
        ],
    );
    assert!(
        text.contains("place,cases,first_operand,second_operand,both\n0,5,"),
        "{text}"
    );
    assert!(d.join("saliency/add-decomposition-12-34.html").exists());
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d);
    let cfg = d.join("train.cfg");
    fs::write(
        &cfg,
        "epochs = 1\nlayers = 1\nheads = 1\nd_model = 8\nd_ff = 8\nvocab_size = 50\nbatch_size = 40\nlimit = 40\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    ok(
        d,
        &[
            "--config",
            c,
            "train",
            "--op",
            "mul",
            "--approach",
            "spaced",
            "--batch-size",
            "20",
        ],
    );
    let manifest = fs::read_to_string(d.join("models/mul-spaced/manifest.txt")).unwrap();
    assert!(manifest.contains("batch_size = 20\n"));
    assert!(manifest.contains("d_model = 8\n"));
    assert!(manifest.contains("lr = 0.0001\n"));
    let loss = fs::read_to_string(d.join("models/mul-spaced/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    // The manifest reproduces the run.
    let first = fs::read(d.join("models/mul-spaced/model.ckpt")).unwrap();
    let m = d.join("models/mul-spaced/manifest.txt");
    ok(d, &["--config", m.to_str().unwrap(), "train"]);
    assert_eq!(
        fs::read(d.join("models/mul-spaced/model.ckpt")).unwrap(),
        first
    );
}

#[test]
fn report_compare_prints_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let header = "Approach,2D+,3D+,4D+,5D+,2D-,3D-,4D-,5D-,2Dx\n";
    fs::write(&a, format!("{header}baseline,50.00,10.00,,,,,,,\n")).unwrap();
    fs::write(&b, format!("{header}baseline,75.50,5.00,,,,,,,1.00\n")).unwrap();
    let out = ok(
        dir.path(),
        &[
            "report",
            "--compare",
            a.to_str().unwrap(),
            b.to_str().unwrap(),
            "--format",
            "csv",
        ],
    );
    assert_eq!(out, format!("{header}baseline,25.50,-5.00,,,,,,,\n"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        run(d, &["train", "--op", "add", "--epochs", "zero"])
            .status
            .code(),
        Some(2)
    );
    let cfg = d.join("bad.cfg");
    fs::write(&cfg, "seed = minus one\n").unwrap();
    assert_eq!(
        run(d, &["--config", cfg.to_str().unwrap(), "generate"])
            .status
            .code(),
        Some(2)
    );

    let missing = run(d, &["eval", "--op", "add", "--approach", "baseline"]);
    assert_eq!(missing.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&missing.stderr);
    assert!(msg.contains("placevalue generate --op add"), "{msg}");

    generate_small(d);
    let untrained = run(d, &["eval", "--op", "add", "--approach", "baseline"]);
    assert_eq!(untrained.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&untrained.stderr)
        .contains("placevalue train --op add --approach baseline"));

    let no_token = run(
        d,
        &["remote", "--endpoint", "http://127.0.0.1:9/", "--op", "add"],
    );
    assert_eq!(no_token.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&no_token.stderr).contains("PLACEVALUE_API_KEY"));
    let down = run(
        d,
        &[
            "remote",
            "--endpoint",
            "http://127.0.0.1:9/",
            "--op",
            "mul",
            "--no-auth",
            "--retries",
            "0",
        ],
    );
    assert_eq!(down.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&down.stderr).contains("left out of the accuracy"));
}

#[test]
fn remote_run_and_offline_replay_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d);
    let server = mock_server::start(|body| {
        let prompt = body["prompt"].as_str().unwrap();
        let last = prompt.lines().last().unwrap();
        let words: Vec<&str> = last.trim_end_matches('.').split(' ').collect();
        let (a, b): (i64, i64) = (words[3].parse().unwrap(), words[5].parse().unwrap());
        // Right on even first operands only.
        let answer = if a % 2 == 0 { a + b } else { a + b + 1 };
        (
            200,
            mock_server::completion_body(&format!(" Translate ... = {answer}\n###")),
        )
    });
    let live = ok(
        d,
        &[
            "remote",
            "--endpoint",
            &server.url,
            "--op",
            "add",
            "--no-auth",
            "--max-cases",
            "4",
        ],
    );
    assert_eq!(server.received.lock().unwrap().len(), 8);
    let transcript = d.join("remote/decomposition-fewshot-add/transcript.jsonl");
    let replayed = ok(d, &["remote", "--replay", transcript.to_str().unwrap()]);
    assert_eq!(
        live.lines().take(2).collect::<Vec<_>>(),
        replayed.lines().take(2).collect::<Vec<_>>()
    );
    assert_eq!(
        fs::read(d.join("remote/decomposition-fewshot-add/report.csv")).unwrap(),
        fs::read(d.join("remote/replay/report.csv")).unwrap()
    );
}
