use std::path::{Path, PathBuf};
use std::process::Command;

use xslu::cli::{EXIT_CONFIG, EXIT_DATA, EXIT_OK};
use xslu::codeswitch::SwitchedUtterance;
use xslu::corpus::{read_jsonl, Utterance};
use xslu::evalkit::{parse_representations_tsv, ErrorStats, MetricsReport};
use xslu::negpool::NegativePool;

fn xslu(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_xslu"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_toy(dir: &Path) -> PathBuf {
    let toy = dir.join("toy");
    let (code, _, err) = xslu(&["make-toy", "--seed", "3", "--out", p(&toy)]);
    assert_eq!(code, EXIT_OK, "{err}");
    toy
}

#[test]
fn pipeline_composes_on_the_toy_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = make_toy(tmp.path());
    let cfg = toy.join("toy.cfg");
    let dict = toy.join("dict.en-xx.txt");

    let switched = tmp.path().join("aug/switched.jsonl");
    let (code, _, err) = xslu(&[
        "augment", "--config", p(&cfg), "--data", p(&toy.join("train.jsonl")), "--dicts", p(&dict), "--out", p(&switched),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let sw: Vec<SwitchedUtterance> = read_jsonl(&switched).unwrap();
    assert_eq!(sw.len(), 600);
    assert!(tmp.path().join("aug/config.cfg").exists());

    let pool_path = tmp.path().join("pools/pool.json");
    let (code, _, err) = xslu(&[
        "pools", "--config", p(&cfg), "--data", p(&toy.join("train.jsonl")), "--schema", p(&toy.join("schema.json")),
        "--out", p(&pool_path),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let pool = NegativePool::load(&pool_path).unwrap();
    assert!(pool.neighbors.values().all(|v| v.len() == 5));

    let run = tmp.path().join("run");
    let (code, out, err) = xslu(&[
        "train", "--config", p(&cfg), "--set", "train.epochs=2", "--set", "cl.n_w=1", "--train",
        p(&toy.join("train.jsonl")), "--valid", p(&toy.join("valid.jsonl")), "--dicts", p(&dict), "--schema",
        p(&toy.join("schema.json")), "--pools", p(&pool_path), "--outdir", p(&run),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("best validation"));
    for f in ["config.cfg", "loss_log.jsonl", "epochs.jsonl", "metrics.json", "best/manifest.json", "best/params.bin"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let echoed = std::fs::read_to_string(run.join("config.cfg")).unwrap();
    assert!(echoed.contains("train.epochs = 2\n") && echoed.contains("cl.n_w = 1\n") && echoed.contains("seed = 3\n"));

    let metrics = tmp.path().join("eval/metrics.json");
    let preds = tmp.path().join("eval/pred.jsonl");
    let (code, _, err) = xslu(&[
        "eval", "--test", p(&toy.join("test_target.jsonl")), "--checkpoint", p(&run.join("best")), "--out", p(&metrics),
        "--predictions", p(&preds),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let m: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m.n, 200);

    let stats = tmp.path().join("eval/errors.json");
    let (code, _, err) = xslu(&[
        "error-stats", "--pred", p(&preds), "--gold", p(&toy.join("test_target.jsonl")), "--out", p(&stats),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let e: ErrorStats = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert!(e.n_utterance_err <= 200 - m.em_correct);

    let tsv = tmp.path().join("eval/repr.tsv");
    let (code, _, err) = xslu(&[
        "export-repr", "--data", p(&toy.join("valid.jsonl")), "--checkpoint", p(&run.join("best")), "--out", p(&tsv),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let reps = parse_representations_tsv(&std::fs::read_to_string(&tsv).unwrap()).unwrap();
    assert_eq!(reps.len(), 100);
    assert_eq!(reps[0].vector.len(), 32);
}

#[test]
fn zero_lambdas_and_ratio_zero_give_the_zero_shot_path() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = make_toy(tmp.path());
    let run = tmp.path().join("run");
    let (code, _, err) = xslu(&[
        "train", "--config", p(&toy.join("toy.cfg")), "--set", "train.epochs=1", "--set", "cl.lambda_u=0", "--set",
        "cl.lambda_s=0", "--set", "cl.lambda_w=0", "--set", "cs.sentence_ratio=0", "--train",
        p(&toy.join("train.jsonl")), "--valid", p(&toy.join("valid.jsonl")), "--dicts",
        p(&toy.join("dict.en-xx.txt")), "--outdir", p(&run),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let log = std::fs::read_to_string(run.join("loss_log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["l_u"], 0.0);
        assert_eq!(v["l_s"], 0.0);
        assert_eq!(v["l_w"], 0.0);
        assert_eq!(v["total"], v["l_j"]);
    }
}

#[test]
fn augment_is_seeded_and_ratio_zero_copies() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = make_toy(tmp.path());
    let data = toy.join("train.jsonl");
    let dict = toy.join("dict.en-xx.txt");
    let run = |name: &str, seed: &str, extra: &[&str]| {
        let out = tmp.path().join(name).join("sw.jsonl");
        let mut args = vec!["augment", "--seed", seed, "--data", p(&data), "--dicts", p(&dict), "--out", p(&out)];
        args.extend_from_slice(extra);
        let (code, _, err) = xslu(&args);
        assert_eq!(code, EXIT_OK, "{err}");
        std::fs::read(&out).unwrap()
    };
    assert_eq!(run("a", "5", &[]), run("b", "5", &[]));
    assert_ne!(run("a", "5", &[]), run("c", "6", &[]));
    let copy = run("d", "5", &["--set", "cs.sentence_ratio=0"]);
    let sw: Vec<SwitchedUtterance> = serde_json::Deserializer::from_slice(&copy)
        .into_iter()
        .map(|r| r.unwrap())
        .collect();
    let src: Vec<Utterance> = read_jsonl(&data).unwrap();
    assert_eq!(sw.len(), src.len());
    assert!(sw.iter().zip(&src).all(|(s, u)| s.tokens == u.tokens && s.replaced_count() == 0));
}

#[test]
fn make_toy_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        assert_eq!(xslu(&["make-toy", "--seed", "9", "--out", p(d)]).0, EXIT_OK);
    }
    for f in xslu::cli::toy::FILES.iter().chain(&["toy.cfg"]) {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = make_toy(tmp.path());
    let (train, valid) = (toy.join("train.jsonl"), toy.join("valid.jsonl"));
    let base = ["train", "--train", p(&train), "--valid", p(&valid), "--outdir"];
    let out = tmp.path().join("r");

    let mut args = base.to_vec();
    args.extend([p(&out), "--set", "train.epoch=3"]);
    let (code, _, err) = xslu(&args);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("unknown key"), "{err}");

    let bad_cfg = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "cl.lambda_u = -1\n").unwrap();
    let mut args = base.to_vec();
    args.extend([p(&out), "--config", p(&bad_cfg)]);
    assert_eq!(xslu(&args).0, EXIT_CONFIG);

    assert_eq!(xslu(&["train", "--bogus-flag"]).0, EXIT_CONFIG);

    let broken = tmp.path().join("broken.jsonl");
    std::fs::write(
        &broken,
        "{\"id\":\"1\",\"locale\":\"en\",\"intent\":\"book_flight\",\"tokens\":[\"a\",\"b\"],\"slots\":[\"O\"]}\n",
    )
    .unwrap();
    let (code, _, err) = xslu(&["eval", "--test", p(&broken), "--checkpoint", p(tmp.path()), "--out", "x.json"]);
    assert_eq!(code, EXIT_DATA, "{err}");
    let (code, _, _) = xslu(&[
        "augment", "--data", p(&broken), "--dicts", p(&toy.join("dict.en-xx.txt")), "--out",
        p(&tmp.path().join("o.jsonl")),
    ]);
    assert_eq!(code, EXIT_DATA);
    let (code, _, err) = xslu(&["augment", "--data", p(&toy.join("train.jsonl")), "--dicts", "nolocales.txt", "--out", "o"]);
    assert_eq!(code, EXIT_CONFIG, "{err}");
}
