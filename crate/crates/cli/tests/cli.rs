use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqcont_cli::commands::{write_bundled, BUNDLED};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn seqcont(args: &[&str], sets: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqcont"));
    cmd.current_dir(root()).args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn bundled_data_matches_its_generator() {
    let dir = tempfile::tempdir().unwrap();
    for (name, ..) in BUNDLED {
        write_bundled(name, &dir.path().join(name)).unwrap();
        for file in ["train.src", "train.tgt", "dev.src", "dev.tgt", "embeddings.vec"] {
            let fresh = fs::read(dir.path().join(name).join(file)).unwrap();
            let bundled = fs::read(root().join("data").join(name).join(file)).unwrap();
            assert!(fresh == bundled, "data/{name}/{file} is stale; rerun the gen_data example");
        }
    }
    assert_eq!(lines(&root().join("data/lexicon/train.src")).len(), 2000);
    assert_eq!(lines(&root().join("data/copy/train.src")).len(), 200);
}

#[test]
fn copy_task_trains_and_translates_its_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let train = seqcont(&["train", "--config", "data/copy/run.cfg"], &[format!("out_dir={out}"), "max_len=20".into()]);
    ok(&train);
    for f in ["config.txt", "metrics.jsonl", "model.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let hash = lines(&dir.path().join("config.txt"))[0].trim_start_matches("# config_hash = ").to_string();
    for l in lines(&dir.path().join("metrics.jsonl")) {
        let v: serde_json::Value = serde_json::from_str(&l).unwrap();
        assert_eq!(v["config_hash"], hash.as_str());
        assert!(v["dev_bleu"].is_number() && v["dev_loss"].is_number());
    }
    let hyp = dir.path().join("hyp.txt");
    ok(&seqcont(
        &["translate", "--config", "data/copy/run.cfg"],
        &[format!("out_dir={out}"), "test_src=data/copy/train.src".into(), format!("output={}", hyp.display())],
    ));
    let refs = lines(&root().join("data/copy/train.tgt"));
    let hyps = lines(&hyp);
    assert_eq!(hyps.len(), refs.len());
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count();
    assert!(exact as f64 >= 0.99 * refs.len() as f64, "exact match {exact}/{}", refs.len());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("hyp.txt.meta.json")).unwrap()).unwrap();
    assert!(meta["config_hash"].is_string());
}

#[test]
fn missing_checkpoint_is_reported_with_its_path() {
    let out = seqcont(&["translate"], &["checkpoint=/nonexistent/dir/model.ckpt".into(), "test_src=data/copy/dev.src".into()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/dir/model.ckpt"));
}

#[test]
fn unknown_key_and_missing_path_fail() {
    let out = seqcont(&["train"], &["foo=1".into()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`foo`"));
    let out = seqcont(&["train"], &["head=softmax".into()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train_src"));
}

#[test]
fn eval_of_identical_files_reports_perfect_bleu() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqcont(
        &["eval"],
        &[
            format!("out_dir={}", dir.path().display()),
            "hyp=data/lexicon/dev.tgt".into(),
            "test_tgt=data/lexicon/dev.tgt".into(),
            "train_tgt=data/lexicon/train.tgt".into(),
        ],
    );
    ok(&out);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["bleu"], 1.0);
    let buckets = report["f1_by_bucket"].as_object().unwrap();
    assert!(!buckets.is_empty());
    assert!(buckets.values().all(|v| v == 1.0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("bleu"));
}

#[test]
fn bench_writes_csv_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let sets: Vec<String> = [
        format!("out_dir={}", dir.path().display()),
        "hidden=8".into(),
        "input_emb=4".into(),
        "output_dim=6".into(),
        "bench_vocab=50,100".into(),
        "tgt_vocab_size=50".into(),
        "bench_batch_sizes=2,4".into(),
        "batch_size=4".into(),
        "bench_trials=2".into(),
        "bench_src_len=3".into(),
        "bench_tgt_len=3".into(),
    ]
    .into();
    ok(&seqcont(&["bench"], &sets));
    let csv = lines(&dir.path().join("bench.csv"));
    assert_eq!(csv[0], "batch_size,samples_per_sec,config");
    assert_eq!(csv.len(), 1 + 2 * 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    let hash = report["config_hash"].as_str().unwrap();
    assert!(csv[1..].iter().all(|l| l.ends_with(hash)));
    assert_eq!(report["timings"].as_object().unwrap().len(), 4);
}
