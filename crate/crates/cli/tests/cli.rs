// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use duch_core::data::{read_labels, PairedDataset};
use duch_core::hamming::PackedCodeIndex;
use duch_core::metrics::{evaluate_direction, ApMode, Direction, MetricReport, RelevanceOracle};
use duch_core::pipeline::encode_split;
use duch_core::trainer::HashModel;

fn duch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = duch(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = "code_len=8\nbatch_size=16\nepochs=2\nhidden2=32\nlr=0.001\n";

/// synth + split into `root/ds` and `root/splits`.
fn prepare(root: &Path) -> PathBuf {
    let ds = root.join("ds");
    let splits = root.join("splits");
    ok(&[
        "synth",
        "--classes",
        "3",
        "--per-class",
        "20",
        "--dim-img",
        "6",
        "--dim-txt",
        "5",
        "--sigma",
        "0.05",
        "--seed",
        "1",
        "--out",
        p(&ds),
    ]);
    ok(&[
        "split",
        "--data",
        p(&ds),
        "--out",
        p(&splits),
        "--seed",
        "2",
    ]);
    fs::write(root.join("cfg.txt"), TINY_CONFIG).unwrap();
    splits
}

#[test]
fn synth_writes_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let run = ok(&[
        "synth",
        "--classes",
        "10",
        "--per-class",
        "100",
        "--dim-img",
        "32",
        "--dim-txt",
        "48",
        "--sigma",
        "0.05",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    for f in [
        "images.duc1",
        "texts.duc1",
        "images_aug.duc1",
        "texts_aug.duc1",
        "labels.txt",
        "ids.txt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ds = PairedDataset::load_dir(&out).unwrap();
    assert_eq!(ds.len(), 1000);
    let stderr = String::from_utf8(run.stderr).unwrap();
    let prov: serde_json::Value = serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(prov["verb"], "synth");
    assert_eq!(prov["resolved"]["per_class"], 100);
}

#[test]
fn full_pipeline_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let splits = prepare(root);
    let cfg = root.join("cfg.txt");
    let run = root.join("run");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&splits),
        "--out",
        p(&run),
        "--seed",
        "4",
    ]);
    for f in [
        "model.dum1",
        "train_log.jsonl",
        "config.json",
        "report.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(run.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let model = run.join("model.dum1");
    let q = root.join("codes_q");
    let db = root.join("codes_db");
    ok(&[
        "encode",
        "--model",
        p(&model),
        "--data",
        p(&splits.join("query")),
        "--out",
        p(&q),
    ]);
    ok(&[
        "encode",
        "--model",
        p(&model),
        "--data",
        p(&splits.join("retrieval")),
        "--out",
        p(&db),
    ]);

    // encode mirrors the library
    let hm = HashModel::load(&model).unwrap();
    let lib = encode_split(&hm, &PairedDataset::load_dir(splits.join("query")).unwrap()).unwrap();
    assert_eq!(
        PackedCodeIndex::load(q.join("images.dub1")).unwrap(),
        lib.images
    );
    assert_eq!(
        PackedCodeIndex::load(q.join("texts.dub1")).unwrap(),
        lib.texts
    );

    let stats = ok(&["index", "--codes", p(&db.join("texts.dub1"))]);
    let stats: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(stats["code_len"], 8);

    let ql = splits.join("query").join("labels.txt");
    let dl = splits.join("retrieval").join("labels.txt");
    let curve = root.join("curve.csv");
    let out = ok(&[
        "eval",
        "--codes-query",
        p(&q.join("images.dub1")),
        "--codes-db",
        p(&db.join("texts.dub1")),
        "--labels-query",
        p(&ql),
        "--labels-db",
        p(&dl),
        "--k",
        "20",
        "--direction",
        "i2t",
        "--curve-out",
        p(&curve),
    ]);
    let report: MetricReport = serde_json::from_slice(&out.stdout).unwrap();
    let expected = evaluate_direction(
        &PackedCodeIndex::load(q.join("images.dub1")).unwrap(),
        &PackedCodeIndex::load(db.join("texts.dub1")).unwrap(),
        &RelevanceOracle::new(read_labels(&ql).unwrap(), read_labels(&dl).unwrap()),
        Direction::ImageToText,
        20,
        ApMode::MinRk,
    )
    .unwrap();
    assert_eq!(report, expected);
    assert!(fs::read_to_string(curve).unwrap().starts_with("K,P\n"));

    let out = ok(&[
        "query",
        "--index",
        p(&db.join("texts.dub1")),
        "--queries",
        p(&q.join("images.dub1")),
        "--k",
        "3",
        "--threads",
        "2",
    ]);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["hits"].as_array().unwrap().len(), 3);
}

#[test]
fn training_is_reproducible_from_printed_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let splits = prepare(root);
    let cfg = root.join("cfg.txt");
    let a = root.join("a");
    let b = root.join("b");
    let c = root.join("c");
    let first = ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&splits),
        "--out",
        p(&a),
    ]);
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&splits),
        "--out",
        p(&b),
    ]);
    let model_a = fs::read(a.join("model.dum1")).unwrap();
    assert_eq!(model_a, fs::read(b.join("model.dum1")).unwrap());

    // the provenance line alone reproduces the run
    let stderr = String::from_utf8(first.stderr).unwrap();
    let prov: serde_json::Value = serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    let printed = root.join("printed.json");
    fs::write(&printed, prov["resolved"].to_string()).unwrap();
    ok(&[
        "train",
        "--config",
        p(&printed),
        "--data",
        p(&splits),
        "--out",
        p(&c),
    ]);
    assert_eq!(model_a, fs::read(c.join("model.dum1")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&duch(&[])), 1);
    assert_eq!(code(&duch(&["frobnicate"])), 1);
    assert_eq!(code(&duch(&["index", "--codes", "x", "--bogus"])), 1);
    assert_eq!(code(&duch(&["--help"])), 0);
    assert_eq!(
        code(&duch(&["index", "--codes", p(&root.join("missing.dub1"))])),
        2
    );

    let splits = prepare(root);
    let cfg = root.join("cfg.txt");
    let out = root.join("run");
    let bad_key = duch(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&splits),
        "--out",
        p(&out),
        "--set",
        "nope=1",
    ]);
    assert_eq!(code(&bad_key), 1);
    fs::write(root.join("bad.txt"), "nope=1\n").unwrap();
    let bad_file = duch(&[
        "train",
        "--config",
        p(&root.join("bad.txt")),
        "--data",
        p(&splits),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&bad_file), 2);
    let diverged = duch(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&splits),
        "--out",
        p(&out),
        "--set",
        "lr=1e300",
        "--set",
        "lr_decay_factor=0.999",
    ]);
    assert_eq!(
        code(&diverged),
        3,
        "{}",
        String::from_utf8_lossy(&diverged.stderr)
    );
    let axis = duch(&[
        "sweep",
        "--config",
        p(&cfg),
        "--data",
        p(&splits),
        "--axis",
        "nope",
        "--values",
        "1",
    ]);
    assert_eq!(code(&axis), 1);
    let direction = duch(&[
        "eval",
        "--codes-query",
        "a",
        "--codes-db",
        "b",
        "--labels-query",
        "c",
        "--labels-db",
        "d",
        "--direction",
        "sideways",
    ]);
    assert_eq!(code(&direction), 1);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let splits = prepare(root);
    let cfg = root.join("cfg.txt");
    let csv = root.join("sweep.csv");
    ok(&[
        "sweep",
        "--config",
        p(&cfg),
        "--data",
        p(&splits),
        "--axis",
        "ablation",
        "--values",
        "none;NA;CL",
        "--k",
        "5",
        "--out",
        p(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "value,mAP_i2t,mAP_t2i");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("NA,"));

    let par = root.join("sweep_par.csv");
    ok(&[
        "sweep",
        "--config",
        p(&cfg),
        "--data",
        p(&splits),
        "--axis",
        "ablation",
        "--values",
        "none;NA;CL",
        "--k",
        "5",
        "--out",
        p(&par),
        "--parallel",
    ]);
    assert_eq!(fs::read_to_string(par).unwrap(), text);
}

#[test]
fn augment_and_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("vec.txt"),
        "planes 1 0 0\naircraft 0.9 0.43588989 0\nmany 0 0 1\nparked 0 1 0\n",
    )
    .unwrap();
    fs::write(root.join("lex.tsv"), "planes\tNOUN\naircraft\tNOUN\n").unwrap();
    fs::write(root.join("caps.txt"), "Many planes are parked.\n\nparked\n").unwrap();
    let out = root.join("aug.txt");
    let log = root.join("aug.jsonl");
    ok(&[
        "augment",
        "--captions",
        p(&root.join("caps.txt")),
        "--embeddings",
        p(&root.join("vec.txt")),
        "--lexicon",
        p(&root.join("lex.tsv")),
        "--out",
        p(&out),
        "--log",
        p(&log),
    ]);
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        "many aircraft are parked.\n\nparked\n"
    );
    let entry: serde_json::Value =
        serde_json::from_str(fs::read_to_string(&log).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(entry["line"], 0);
    assert_eq!(entry["replacement"], "aircraft");

    let out = ok(&["gradcheck", "--rounds", "1", "--seed", "3"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 10);
}

#[test]
fn query_thread_override_from_environment() {
    assert_eq!(duch_cli::query_threads(Some(3)).unwrap(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let splits = prepare(root);
    let run = root.join("run");
    ok(&[
        "train",
        "--config",
        p(&root.join("cfg.txt")),
        "--data",
        p(&splits),
        "--out",
        p(&run),
    ]);
    let codes = root.join("codes");
    ok(&[
        "encode",
        "--model",
        p(&run.join("model.dum1")),
        "--data",
        p(&splits.join("query")),
        "--out",
        p(&codes),
    ]);
    let (db, q) = (codes.join("texts.dub1"), codes.join("images.dub1"));
    let args = ["query", "--index", p(&db), "--queries", p(&q), "--k", "2"];
    let base = ok(&args);
    let env = Command::new(env!("CARGO_BIN_EXE_duch"))
        .args(args)
        .env(duch_cli::QUERY_THREADS_ENV, "2")
        .output()
        .unwrap();
    assert_eq!(code(&env), 0);
    assert_eq!(env.stdout, base.stdout);
    let bad = Command::new(env!("CARGO_BIN_EXE_duch"))
        .args(args)
        .env(duch_cli::QUERY_THREADS_ENV, "many")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
}
