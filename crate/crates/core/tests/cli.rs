use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use landmark_retrieval::evaluation::FusedRecord;
use landmark_retrieval::feature;

fn lmret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmret"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lmret")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
n_landmarks = 4
images_per_landmark = 4
queries_per_landmark = 1
features_per_image = 40
parts_per_landmark = 60
distractor_queries = 2
coarse_k = 8
kd_leaf_max = 100
steps = 50
";

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn hash_dir(dir: &Path) -> Vec<(String, String)> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let digest = Sha256::digest(std::fs::read(dir.join(&n)).unwrap());
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            (n, hex)
        })
        .collect()
}

#[test]
fn gen_is_reproducible_and_counts_match() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = lmret(&["gen", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(hash_dir(&a), hash_dir(&b));
    let db = feature::read_features_file(&a.join("db.jsonl")).unwrap();
    let q = feature::read_features_file(&a.join("queries.jsonl")).unwrap();
    assert_eq!(db.len(), 16);
    assert_eq!(q.len(), 4 + 2);
    assert!(db.iter().all(|i| i.features.len() == 40));
    let bags = std::fs::read_to_string(a.join("bags.jsonl")).unwrap();
    assert_eq!(bags.lines().count(), 16);

    // a different seed changes the corpus
    let c = tmp.path().join("c");
    let o = lmret(&["gen", "--config", &cfg, "--seed", "8", "--out", c.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(hash_dir(&a), hash_dir(&c));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let out = tmp.path().join("d");
    let o = lmret(&["gen", "--config", &cfg, "--n-landmarks", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(feature::read_features_file(&out.join("db.jsonl")).unwrap().len(), 12);
}

#[test]
fn missing_index_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.idx");
    let o = lmret(&["query", "--index", missing.to_str().unwrap(), "--queries", "x.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("nope.idx"), "{e}");
    assert_eq!(e.trim().lines().count(), 1, "{e}");
}

#[test]
fn malformed_config_exits_2_naming_key() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, "coarse_kk = 3\n").unwrap();
    let o = lmret(&["gen", "--config", p.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("coarse_kk"), "{}", stderr(&o));

    std::fs::write(&p, "top_k = \"sixty\"\n").unwrap();
    let o = lmret(&["gen", "--config", p.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("top_k") || stderr(&o).contains("sixty"), "{}", stderr(&o));
}

#[test]
fn invalid_values_and_usage_exit_2() {
    let o = lmret(&["fuse", "--local", "a.csv", "--global", "b.csv", "--weight", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = lmret(&["build-index", "--features", "f", "--out", "o", "--coarse-k", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = lmret(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fuse_weight_one_reproduces_local_ranking() {
    let tmp = tempfile::tempdir().unwrap();
    let local = tmp.path().join("local.csv");
    let global = tmp.path().join("global.csv");
    std::fs::write(&local, "query_id,image_id,score\nq,a,3\nq,b,9\nq,c,5\nr,a,1\nr,b,2\n").unwrap();
    std::fs::write(&global, "query_id,image_id,score\nq,a,0.9\nq,b,0.1\nq,c,0.5\nr,a,0.7\nr,b,0.2\n").unwrap();
    let run = |w: &str| -> Vec<(String, String)> {
        let out = tmp.path().join(format!("fused{w}.jsonl"));
        let o = lmret(&[
            "fuse",
            "--local",
            local.to_str().unwrap(),
            "--global",
            global.to_str().unwrap(),
            "--weight",
            w,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out)
            .unwrap()
            .lines()
            .map(|l| {
                let r: FusedRecord = serde_json::from_str(l).unwrap();
                (r.query_id, r.image_id)
            })
            .collect()
    };
    let pairs = |v: &[(&str, &str)]| v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect::<Vec<_>>();
    assert_eq!(run("1.0"), pairs(&[("q", "b"), ("q", "c"), ("q", "a"), ("r", "b"), ("r", "a")]));
    assert_eq!(run("0"), pairs(&[("q", "a"), ("q", "c"), ("q", "b"), ("r", "a"), ("r", "b")]));
}

#[test]
fn small_end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let p = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen".into(), "--out".into(), p("data")],
        vec!["train-attention".into(), "--bags".into(), p("data/bags.jsonl"), "--out".into(), p("att.bin")],
        vec!["build-index".into(), "--features".into(), p("dbdir"), "--out".into(), p("idx.bin")],
        vec!["query".into(), "--index".into(), p("idx.bin"), "--queries".into(), p("data/queries.jsonl"), "--out".into(), p("run.jsonl")],
        vec![
            "evaluate".into(),
            "--run".into(),
            p("run.jsonl"),
            "--db-gt".into(),
            p("data/db_gt.csv"),
            "--queries-gt".into(),
            p("data/queries_gt.csv"),
            "--pr-out".into(),
            p("pr.csv"),
            "--summary".into(),
            p("summary.json"),
        ],
    ];
    for (i, mut args) in steps.into_iter().enumerate() {
        if i == 2 {
            // directory input: only database feature files
            std::fs::create_dir(p("dbdir")).unwrap();
            std::fs::copy(p("data/db.jsonl"), p("dbdir/db.jsonl")).unwrap();
        }
        args.extend(["--config".into(), cfg.clone()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = lmret(&refs);
        assert!(o.status.success(), "{}: {}", args[0], stderr(&o));
    }
    let loss = std::fs::read_to_string(p("att.bin.loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("pass,loss"));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("idx.bin.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["bytes_per_descriptor"], 15);
    assert!(stats["leaf_histogram"].is_array());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["distractor_queries"], 2);
    assert_eq!(summary["distractors_rejected"], 2);
    let pr = std::fs::read_to_string(p("pr.csv")).unwrap();
    let mut lines = pr.lines();
    assert_eq!(lines.next(), Some("threshold,precision,recall"));
    assert!(lines.all(|l| l.split(',').count() == 3 && !l.starts_with("threshold")), "{pr}");
}
