use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spancl::corpus::{build_support_set, write_corpus, Sentence};
use spancl::synth::separable_benchmark;

const BIN: &str = env!("CARGO_BIN_EXE_spancl");

const SYNTH: [&str; 8] = [
    "--synthetic-dim",
    "32",
    "--synthetic-seed",
    "0",
    "--synthetic-labels",
    "L0,L1,L2,L3,L4,L5,L6,L7,L8,L9",
    "--synthetic-amplitude",
    "5",
];

fn spancl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn spancl")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(path: &Path, sentences: &[Sentence]) {
    write_corpus(BufWriter::new(File::create(path).unwrap()), sentences).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Data {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train: PathBuf,
    support: PathBuf,
    query: PathBuf,
}

fn data() -> Data {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let bench = separable_benchmark(0).unwrap();
    let (support, query) = build_support_set(&bench.test, 5, 0).unwrap();
    let d = Data {
        train: root.join("train.jsonl"),
        support: root.join("support.jsonl"),
        query: root.join("query.jsonl"),
        root,
        _dir: dir,
    };
    write(&d.train, &bench.train);
    write(&d.support, &support);
    write(&d.query, &query[..40]);
    d
}

fn train(d: &Data, out: &Path) {
    let mut args = vec![
        "train",
        "--corpus",
        s(&d.train),
        "--out",
        s(out),
        "--episodes",
        "30",
        "--hidden",
        "8",
        "--biaffine-dim",
        "8",
        "--seed",
        "4",
    ];
    args.extend(SYNTH);
    let o = spancl(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn predict(d: &Data, ckpt: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "predict",
        "--checkpoint",
        s(ckpt),
        "--support",
        s(&d.support),
        "--query",
        s(&d.query),
        "--out",
        s(out),
    ];
    args.extend(SYNTH);
    args.extend(extra);
    spancl(&args)
}

#[test]
fn train_finetune_predict_evaluate() {
    let d = data();
    let run = d.root.join("run");
    train(&d, &run);
    for f in ["model.ckpt", "train_log.jsonl", "run_config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 30);

    let tuned = d.root.join("tuned");
    let base = run.join("model.ckpt");
    let mut args = vec![
        "finetune",
        "--checkpoint",
        s(&base),
        "--support",
        s(&d.support),
        "--out",
        s(&tuned),
        "--steps",
        "5",
    ];
    args.extend(SYNTH);
    let o = spancl(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = tuned.join("model.ckpt");
    assert_ne!(fs::read(&ckpt).unwrap(), fs::read(run.join("model.ckpt")).unwrap());

    let one = d.root.join("one.jsonl");
    let four = d.root.join("four.jsonl");
    assert_eq!(code(&predict(&d, &ckpt, &one, &["--workers", "1"])), 0);
    assert_eq!(code(&predict(&d, &ckpt, &four, &["--workers", "4"])), 0);
    assert_eq!(fs::read(&one).unwrap(), fs::read(&four).unwrap());
    assert!(d.root.join("one.jsonl.run.json").is_file());

    for method in ["proto", "nnshot"] {
        let out = d.root.join(format!("{method}.jsonl"));
        assert_eq!(code(&predict(&d, &ckpt, &out, &["--method", method])), 0);
    }

    let o = spancl(&["evaluate", "--pred", s(&one), "--gold", s(&d.query)]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let f1 = report["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert!(report["per_label"].is_object());
}

#[test]
fn runs_are_reproducible() {
    let d = data();
    let outs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|tag| {
            let run = d.root.join(tag);
            train(&d, &run);
            let out = d.root.join(format!("{tag}.jsonl"));
            assert_eq!(code(&predict(&d, &run.join("model.ckpt"), &out, &[])), 0);
            fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn sample_episodes_writes_layout() {
    let d = data();
    let out = d.root.join("episodes");
    let o = spancl(&[
        "sample-episodes",
        "--corpus",
        s(&d.train),
        "--out",
        s(&out),
        "--way",
        "3",
        "--shot",
        "2",
        "--count",
        "4",
        "--seed",
        "9",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let index = fs::read_to_string(out.join("episodes.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 4);
    for k in 0..4 {
        for f in ["support.jsonl", "query.jsonl"] {
            assert!(out.join(format!("episode-{k}")).join(f).is_file());
        }
    }
    let rec: serde_json::Value = serde_json::from_str(index.lines().next().unwrap()).unwrap();
    assert_eq!(rec["labels"].as_array().unwrap().len(), 3);
}

#[test]
fn dump_reps_writes_csv() {
    let d = data();
    let run = d.root.join("run");
    train(&d, &run);
    let out = d.root.join("reps.csv");
    let ckpt = run.join("model.ckpt");
    let mut args = vec![
        "dump-reps",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&d.support),
        "--out",
        s(&out),
    ];
    args.extend(SYNTH);
    let o = spancl(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("sentence_id,start,end,label,v0,"));
    assert_eq!(header.split(',').count(), 4 + 32);
}

#[test]
fn grad_check_passes() {
    let o = spancl(&["grad-check", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.trim_end().ends_with("(pass)"), "{out}");
}

#[test]
fn exit_codes() {
    let d = data();
    // usage and validation problems
    assert_eq!(code(&spancl(&["no-such-command"])), 1);
    assert_eq!(code(&spancl(&["train", "--episodes", "many"])), 1);
    let missing = d.root.join("missing.jsonl");
    assert_eq!(
        code(&spancl(&["evaluate", "--pred", s(&missing), "--gold", s(&d.query)])),
        1
    );
    let bad = d.root.join("bad.jsonl");
    fs::write(&bad, "{not json}\n").unwrap();
    let o = spancl(&["sample-episodes", "--corpus", s(&bad), "--out", s(&d.root.join("x"))]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    assert_eq!(code(&spancl(&["--help"])), 0);

    // runtime failure: output directory cannot be created
    let run = d.root.join("run");
    train(&d, &run);
    let blocked = d.root.join("train.jsonl").join("preds.jsonl");
    assert_eq!(code(&predict(&d, &run.join("model.ckpt"), &blocked, &[])), 2);
}
