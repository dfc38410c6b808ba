use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn densekit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densekit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn json_stdout(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

const TOPICS: [&[&str]; 4] = [
    &["solar", "wind", "flare", "corona", "plasma"],
    &["ocean", "tide", "salinity", "current", "reef"],
    &["glacier", "ice", "melt", "snow", "permafrost"],
    &["rover", "crater", "regolith", "dust", "orbit"],
];

/// A small BEIR-layout dataset plus query/passage pairs on four topics.
fn write_dataset(dir: &Path) {
    let mut corpus = String::new();
    let mut queries = String::new();
    let mut qrels = String::from("query-id\tcorpus-id\tscore\n");
    let mut pairs = String::new();
    for (t, words) in TOPICS.iter().enumerate() {
        for d in 0..4 {
            let text: Vec<&str> = (0..6).map(|i| words[(i * (d + 1) + d) % words.len()]).collect();
            let text = text.join(" ");
            corpus.push_str(&format!("{{\"_id\": \"d{t}{d}\", \"title\": \"\", \"text\": \"{text}\"}}\n"));
            let query = format!("{} {}", words[d % 5], words[(d + 2) % 5]);
            pairs.push_str(&format!("{{\"query\": \"{query}\", \"positive\": \"{text}\"}}\n"));
        }
        queries.push_str(&format!("{{\"_id\": \"q{t}\", \"text\": \"{} {}\"}}\n", words[0], words[1]));
        qrels.push_str(&format!("q{t}\td{t}0\t1\nq{t}\td{t}1\t2\n"));
    }
    std::fs::write(dir.join("corpus.jsonl"), corpus).unwrap();
    std::fs::write(dir.join("queries.jsonl"), queries).unwrap();
    std::fs::write(dir.join("qrels.tsv"), qrels).unwrap();
    std::fs::write(dir.join("pairs.jsonl"), pairs).unwrap();
}

const CONFIG: &str = r#"
[tokenizer]
vocab_size = 300

[encoder]
num_layers = 2
num_heads = 2
model_dim = 16
ff_dim = 32
max_seq_len = 16

[train]
batch_size = 4
steps = 6
lr = 0.003
seed = 7

[[train.stages]]
name = "mlm"
objective = "mlm"
sources = ["docs"]
steps = 4

[[train.stages]]
name = "pairs"
objective = "contrastive"
sources = ["pairs"]

[retrieval]
k = 5
workers = 2

[paths]
corpus = "corpus.jsonl"
queries = "queries.jsonl"
qrels = "qrels.tsv"
checkpoints = "ckpt"
reports = "reports"

[sources]
docs = "corpus.jsonl"
pairs = "pairs.jsonl"
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn sha256_file(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

fn manifest(dir: &Path, command: &str) -> Value {
    let p = dir.join("reports").join(format!("{command}.manifest.json"));
    serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap()
}

#[test]
fn full_pipeline_with_manifests() {
    let tmp = setup();
    let dir = tmp.path();
    let c = ["--config", "run.toml"];
    let with = |extra: &[&str]| -> Vec<String> { c.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(with(extra));
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        densekit(dir, &args)
    };

    assert_ok(&run("train-tokenizer", &[]));
    let tok: Value = serde_json::from_slice(&std::fs::read(dir.join("ckpt/tokenizer.json")).unwrap()).unwrap();
    assert!(tok.is_object());

    assert_ok(&run("pretrain-mlm", &["--set", "train.stages=[]", "--set", "sources.pairs=corpus.jsonl"]));
    assert!(dir.join("ckpt/mlm.dkt").exists());

    let out = run("train-embedder", &["--init", "ckpt/mlm.dkt"]);
    assert_ok(&out);
    assert!(stderr(&out).contains("stage pairs: 6 steps"));
    let log = std::fs::read_to_string(dir.join("reports/train-embedder.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);

    assert_ok(&run("distill", &["--teacher", "ckpt/embedder.dkt", "--set", "encoder.num_layers=1", "--set", "train.stages=[]"]));
    assert!(dir.join("ckpt/student.dkt").exists());

    assert_ok(&run("index", &[]));
    assert_ok(&run("search", &["--timing"]));
    let run_tsv = std::fs::read_to_string(dir.join("reports/run.tsv")).unwrap();
    assert_eq!(run_tsv.lines().filter(|l| l.starts_with("q0\t")).count(), 5);
    let timing: Value = serde_json::from_slice(&std::fs::read(dir.join("reports/timing.json")).unwrap()).unwrap();
    assert_eq!(timing["workers"], 2);

    let out = run("eval-retrieval", &[]);
    assert_ok(&out);
    let report = json_stdout(&out);
    assert!(report["recall@5"].as_f64().is_some() && report["ndcg@5"].as_f64().is_some());
    assert_eq!(report["evaluated"], 4);

    // Every manifest hashes what is on disk and echoes the seed.
    let m = manifest(dir, "search");
    for entry in m["outputs"].as_array().unwrap() {
        let p = dir.join(entry["path"].as_str().unwrap());
        assert_eq!(entry["sha256"].as_str().unwrap(), sha256_file(&p));
    }
    let m = manifest(dir, "train-embedder");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["train"]["lr"], 0.003);
    assert_eq!(m["args"]["init"], "ckpt/mlm.dkt");
    let inputs: Vec<&str> = m["inputs"].as_array().unwrap().iter().map(|i| i["path"].as_str().unwrap()).collect();
    assert!(inputs.contains(&"ckpt/mlm.dkt") && inputs.contains(&"pairs.jsonl"));

    // Re-running reproduces byte-identical artifacts and leaves inputs untouched.
    let before: Vec<(PathBuf, String)> = ["ckpt/embedder.dkt", "reports/train-embedder.log.jsonl", "ckpt/mlm.dkt", "pairs.jsonl"]
        .iter()
        .map(|p| (dir.join(p), sha256_file(&dir.join(p))))
        .collect();
    let manifest_before = std::fs::read(dir.join("reports/train-embedder.manifest.json")).unwrap();
    assert_ok(&run("train-embedder", &["--init", "ckpt/mlm.dkt"]));
    for (p, h) in before {
        assert_eq!(sha256_file(&p), h, "{}", p.display());
    }
    assert_eq!(std::fs::read(dir.join("reports/train-embedder.manifest.json")).unwrap(), manifest_before);
    let run_before = sha256_file(&dir.join("reports/run.tsv"));
    assert_ok(&run("search", &[]));
    assert_eq!(sha256_file(&dir.join("reports/run.tsv")), run_before);
}

#[test]
fn missing_config_exits_1_without_outputs() {
    let tmp = setup();
    let out = densekit(tmp.path(), &["train-tokenizer", "--config", "nope.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error[config]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!tmp.path().join("reports").exists());
    assert!(!tmp.path().join("checkpoints").exists());
}

#[test]
fn rejects_unknown_flags_keys_and_bad_values() {
    let tmp = setup();
    let dir = tmp.path();
    let cases: [(&[&str], &str); 5] = [
        (&["train-tokenizer", "--bogus"], "error[usage]"),
        (&["frobnicate"], "error[usage]"),
        (&["train-tokenizer", "--config", "run.toml", "--set", "train.lerning_rate=1"], "error[config]"),
        (&["train-tokenizer", "--config", "run.toml", "--set", "tokenizer.vocab_size=12"], "error[validation]"),
        (&["eval-retrieval", "--config", "run.toml", "--run", "missing.tsv"], "error[input]"),
    ];
    for (args, prefix) in cases {
        let out = densekit(dir, args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(stderr(&out).starts_with(prefix), "{args:?}: {}", stderr(&out));
    }
    assert!(!dir.join("reports").exists());
}

#[test]
fn environment_overrides_config() {
    let tmp = setup();
    let dir = tmp.path();
    std::fs::write(dir.join("run.tsv"), "q0\td00\t1\t0.9\nq0\td01\t2\t0.8\nq0\td02\t3\t0.7\n").unwrap();
    std::fs::write(dir.join("qrels1.tsv"), "query-id\tcorpus-id\tscore\nq0\td01\t1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_densekit"))
        .current_dir(dir)
        .args(["eval-retrieval", "--config", "run.toml", "--run", "run.tsv", "--qrels", "qrels1.tsv"])
        .env("DENSEKIT_RETRIEVAL_K", "1")
        .output()
        .unwrap();
    assert_ok(&out);
    let r = json_stdout(&out);
    assert_eq!(r["recall@1"], 0.0);
    let out = Command::new(env!("CARGO_BIN_EXE_densekit"))
        .current_dir(dir)
        .args(["eval-retrieval", "--config", "run.toml", "--run", "run.tsv", "--qrels", "qrels1.tsv", "--k", "2"])
        .env("DENSEKIT_RETRIEVAL_K", "1")
        .output()
        .unwrap();
    let r = json_stdout(&out);
    assert_eq!(r["recall@2"], 1.0);
    // Single relevant document at rank 2: 1 / log2(3).
    assert!((r["ndcg@2"].as_f64().unwrap() - 1.0 / 3f64.log2()).abs() < 1e-12);
}

#[test]
fn eval_retrieval_matches_hand_computed_fixture() {
    let tmp = setup();
    let dir = tmp.path();
    std::fs::write(
        dir.join("run.tsv"),
        "a\tx\t1\t3.0\na\ty\t2\t2.0\na\tz\t3\t1.0\nb\tu\t1\t5.0\nb\tv\t2\t4.0\nc\tw\t1\t1.0\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("q.tsv"),
        "query-id\tcorpus-id\tscore\na\ty\t1\na\tq\t1\nb\tu\t2\nb\tv\t1\nc\tnothing\t0\n",
    )
    .unwrap();
    let out = densekit(dir, &["eval-retrieval", "--run", "run.tsv", "--qrels", "q.tsv", "--k", "10"]);
    assert_ok(&out);
    let r = json_stdout(&out);
    // a: one of two relevant found at rank 2; b: both found, ideal order.
    let ndcg_a = (1.0 / 3f64.log2()) / (1.0 + 1.0 / 3f64.log2());
    assert!((r["recall@10"].as_f64().unwrap() - (0.5 + 1.0) / 2.0).abs() < 1e-12);
    assert!((r["ndcg@10"].as_f64().unwrap() - (ndcg_a + 1.0) / 2.0).abs() < 1e-12);
    assert_eq!(r["evaluated"], 2);
    assert_eq!(r["excluded"], 1);
}

#[test]
fn analyze_vocab_prints_overlap_report() {
    let tmp = setup();
    let dir = tmp.path();
    std::fs::write(dir.join("a.json"), r#"{"<s>": 0, "</s>": 1, "sun": 2, "wind": 3}"#).unwrap();
    std::fs::write(dir.join("b.txt"), "<s>\n</s>\nice\n").unwrap();
    let out = densekit(dir, &["analyze-vocab", "--a", "a.json", "--b", "b.txt"]);
    assert_ok(&out);
    let r = json_stdout(&out);
    assert_eq!((r["common_count"].as_u64(), r["only_a"].as_u64(), r["only_b"].as_u64()), (Some(2), Some(2), Some(1)));
    assert_eq!(r["common_fraction"], 0.5);
    assert!(dir.join("reports/analyze-vocab.manifest.json").exists());
}

#[test]
fn token_stats_compares_tokenizers() {
    let tmp = setup();
    let dir = tmp.path();
    assert_ok(&densekit(dir, &["train-tokenizer", "--config", "run.toml", "--out", "small.json", "--vocab-size", "262"]));
    assert_ok(&densekit(dir, &["train-tokenizer", "--config", "run.toml", "--out", "big.json"]));
    std::fs::write(dir.join("s.jsonl"), "{\"text\": \"solar wind plasma\", \"source\": \"helio\"}\nocean tide\n").unwrap();
    let out = densekit(dir, &["token-stats", "--tokenizer", "small=small.json", "--tokenizer", "big=big.json", "--samples", "s.jsonl"]);
    assert_ok(&out);
    let r = json_stdout(&out);
    assert_eq!(r["samples"], 2);
    let small = r["models"][0]["total"].as_u64().unwrap();
    let big = r["models"][1]["total"].as_u64().unwrap();
    assert!(big < small, "{big} vs {small}");
}

#[test]
fn eval_metrics_tasks() {
    let tmp = setup();
    let dir = tmp.path();
    std::fs::write(dir.join("scores.json"), r#"{"A": {"a1": 90, "a2": 80}, "B": {"b1": [69, 71]}}"#).unwrap();
    let out = densekit(dir, &["eval-metrics", "--task", "aggregate", "--scores", "scores.json"]);
    assert_ok(&out);
    let r = json_stdout(&out);
    assert_eq!((r["micro"].as_f64(), r["macro"].as_f64()), (Some(80.0), Some(77.5)));

    std::fs::write(dir.join("gold.iob"), "a\tB-x\nb\tI-x\nc\tO\nd\tO\n").unwrap();
    std::fs::write(dir.join("pred.iob"), "a\tB-x\nb\tI-x\nc\tO\nd\tB-y\n").unwrap();
    let r = json_stdout(&densekit(dir, &["eval-metrics", "--task", "ner", "--pred", "pred.iob", "--gold", "gold.iob"]));
    assert!((r["f1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);

    std::fs::write(dir.join("bad.iob"), "a\tO\nb\tI-x\n").unwrap();
    let out = densekit(dir, &["eval-metrics", "--task", "ner", "--pred", "bad.iob", "--gold", "gold.iob"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"));

    std::fs::write(
        dir.join("qa.json"),
        r#"[{"context": "The rover landed in Jezero crater.", "question": "Where?", "answers": [{"text": "Jezero crater", "answer_start": 20}]}]"#,
    )
    .unwrap();
    std::fs::write(dir.join("qa_pred.json"), r#"["the Jezero"]"#).unwrap();
    let r = json_stdout(&densekit(dir, &["eval-metrics", "--task", "qa", "--pred", "qa_pred.json", "--gold", "qa.json"]));
    assert!((r["f1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(r["exact_match"], 0.0);

    std::fs::write(dir.join("sts.tsv"), "s1\ts2\tscore\na\tb\t1\nc\td\t2\ne\tf\t3\n").unwrap();
    std::fs::write(dir.join("sts_pred.txt"), "2\n4\n6\n").unwrap();
    let r = json_stdout(&densekit(dir, &["eval-metrics", "--task", "sts", "--pred", "sts_pred.txt", "--gold", "sts.tsv"]));
    assert!((r["pearson"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    std::fs::write(dir.join("g.txt"), "yes\nno\nyes\nno\n").unwrap();
    std::fs::write(dir.join("p.txt"), "yes\nno\nno\nno\n").unwrap();
    let r = json_stdout(&densekit(dir, &["eval-metrics", "--task", "accuracy", "--pred", "p.txt", "--gold", "g.txt"]));
    assert_eq!(r["accuracy"], 0.75);
}

#[test]
fn diverging_training_exits_2_without_outputs() {
    let tmp = setup();
    let dir = tmp.path();
    assert_ok(&densekit(dir, &["train-tokenizer", "--config", "run.toml"]));
    let out = densekit(
        dir,
        &["train-embedder", "--config", "run.toml", "--set", "train.stages=[]", "--set", "sources.docs=pairs.jsonl", "--set", "train.lr=1e300", "--steps", "20"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error[runtime]: non-finite"), "{}", stderr(&out));
    assert!(!dir.join("ckpt/embedder.dkt").exists());
    assert!(!dir.join("reports/train-embedder.manifest.json").exists());
}
