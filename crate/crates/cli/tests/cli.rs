use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_slotgen");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn slotgen")
}

fn run_with_input(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn slotgen");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().expect("wait for slotgen")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", text(&o.stdout), text(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A corpus and a quickly overfit checkpoint shared by the tests below.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let run_dir = dir.path().join("run");
        ok(run(&[
            "gen-corpus",
            "--out",
            s(&data),
            "--seed",
            "3",
            "--catalog-size",
            "40",
            "--train",
            "40",
            "--valid",
            "4",
            "--test",
            "6",
            "--turn-pairs",
            "2",
        ]));
        ok(run(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&run_dir),
            "--seed",
            "4",
            "--set",
            "d_h=32",
            "--set",
            "d_e=32",
            "--set",
            "d_img=16",
            "--set",
            "epochs=40",
            "--set",
            "batch=2",
            "--set",
            "lr=0.003",
            "--set",
            "max_len=20",
        ]));
        Fixture {
            _dir: dir,
            data,
            run: run_dir,
        }
    })
}

#[test]
fn gen_corpus_writes_every_file() {
    let f = fixture();
    for name in ["catalog.tsv", "kb.tsv", "train.tsv", "valid.tsv", "test.tsv"] {
        assert!(f.data.join(name).is_file(), "{name} missing");
    }
    assert!(f.run.join("model.ckpt").is_file());
    let log = fs::read_to_string(f.run.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 40, "{log}");
    assert!(log.contains("kept epoch"));
}

#[test]
fn eval_writes_both_report_formats() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let ckpt = f.run.join("model.ckpt");
    let o = ok(run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--out",
        s(out.path()),
        "--beam",
        "2",
        "--sequential",
    ]));
    let report = fs::read_to_string(out.path().join("report.txt")).unwrap();
    assert_eq!(report, text(&o.stdout));
    let kv = fs::read_to_string(out.path().join("report.kv")).unwrap();
    let parsed = slotgen::metrics::EvalReport::parse_kv(&kv).unwrap();
    assert!((0.0..=1.0).contains(&parsed.bleu4));
    assert!((0.0..=1.0).contains(&parsed.slot_f1));

    // the parallel path writes the same report
    let out2 = TempDir::new().unwrap();
    ok(run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--out",
        s(out2.path()),
        "--beam",
        "2",
    ]));
    assert_eq!(kv, fs::read_to_string(out2.path().join("report.kv")).unwrap());
}

#[test]
fn eval_on_an_empty_split_is_a_validation_error() {
    let f = fixture();
    let data = TempDir::new().unwrap();
    for name in ["catalog.tsv", "kb.tsv", "train.tsv", "valid.tsv"] {
        fs::copy(f.data.join(name), data.path().join(name)).unwrap();
    }
    fs::write(data.path().join("test.tsv"), "").unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&f.run.join("model.ckpt")),
        "--data",
        s(data.path()),
        "--out",
        s(data.path()),
    ]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));
    assert!(!data.path().join("report.txt").exists());
}

#[test]
fn predict_slots_tags_every_user_turn() {
    let f = fixture();
    let o = ok(run(&[
        "predict-slots",
        "--checkpoint",
        s(&f.run.join("model.ckpt")),
        "--data",
        s(&f.data),
    ]));
    let out = text(&o.stdout);
    let data = slotgen::corpus::read_dataset(&f.data).unwrap();
    let users: Vec<_> = data.test.iter().flat_map(|d| d.user_turns()).collect();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), users.len());
    for (l, u) in lines.iter().zip(&users) {
        assert_eq!(l.split_whitespace().count(), u.tokens.len());
        for pair in l.split_whitespace() {
            let (tok, tag) = pair.rsplit_once('/').expect("token/TAG");
            assert!(!tok.is_empty());
            assert!(tag == "O" || tag.starts_with("B-") || tag.starts_with("I-"), "{pair}");
        }
    }
}

#[test]
fn chat_extracts_slots_and_responds() {
    let f = fixture();
    let ckpt = f.run.join("model.ckpt");
    let args = ["chat", "--checkpoint", s(&ckpt), "--data", s(&f.data)];
    let o = ok(run_with_input(
        &args,
        "show me a red leather bag\n/reset\nshow me this [img:1,2,3,4,5,6]\nwhat about [img:0,999]\n/quit\nnever read\n",
    ));
    let out = text(&o.stdout);
    assert!(out.contains("color=red"), "{out}");
    assert!(out.contains("material=leather"), "{out}");
    assert!(out.contains("system: "), "{out}");
    assert!(out.contains("history cleared"), "{out}");
    assert!(out.contains("at most 5"), "{out}");
    assert!(out.contains("unknown image id \"999\""), "{out}");
    assert_eq!(out.matches("system: ").count(), 2, "{out}");
}

#[test]
fn chat_quits_cleanly() {
    let f = fixture();
    let ckpt = f.run.join("model.ckpt");
    let o = run_with_input(&["chat", "--checkpoint", s(&ckpt), "--data", s(&f.data)], "/quit\n");
    assert_eq!(code(&o), 0);
    let o = run_with_input(&["chat", "--checkpoint", s(&ckpt), "--data", s(&f.data)], "");
    assert_eq!(code(&o), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&[])), 1);
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "train",
        "--data",
        s(dir.path()),
        "--out",
        s(dir.path()),
        "--set",
        "no_such_key=1",
    ]);
    assert_eq!(code(&o), 1, "{}", text(&o.stderr));
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn bad_inputs_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "d_h = 16\nno_such_key = 3\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));

    let o = run(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(&["eval", "--checkpoint", s(&junk), "--data", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));
}

#[test]
fn ablate_reports_eight_rows() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let o = ok(run(&[
        "ablate",
        "--data",
        s(&f.data),
        "--seeds",
        "7",
        "--out",
        s(out.path()),
        "--set",
        "d_h=8",
        "--set",
        "d_e=8",
        "--set",
        "d_img=8",
        "--set",
        "epochs=1",
        "--set",
        "batch=8",
        "--set",
        "max_len=8",
    ]));
    let table = text(&o.stdout);
    assert_eq!(fs::read_to_string(out.path().join("ablation.txt")).unwrap(), table);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "seeds: 7");
    assert_eq!(lines.len(), 10, "{table}");
    assert!(lines[2..].iter().all(|l| l.matches('±').count() == 4));
}

#[test]
fn example_config_parses_and_trains() {
    let f = fixture();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.conf");
    let parsed = slotgen::config::RunConfig::read(&cfg).unwrap();
    assert_eq!(parsed.d_h, 128);
    let out = TempDir::new().unwrap();
    ok(run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data),
        "--out",
        s(out.path()),
        "--set",
        "epochs=1",
        "--set",
        "max_len=5",
        "--set",
        "beam_width=1",
    ]));
    let model = slotgen::checkpoint::load(&out.path().join("model.ckpt")).unwrap();
    assert_eq!(model.config.d_h, 128);
    assert_eq!(model.config.epochs, 1);
}
