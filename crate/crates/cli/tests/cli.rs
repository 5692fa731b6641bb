use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wora::adapters::{init_adapter, AdapterKind};
use wora::embio::{read_matrix, save_checkpoint, write_embeddings, write_matrix, EmbeddingMatrix};
use wora::harness::{generate_synthetic, SyntheticSpec};
use wora::Matrix;

fn wora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wora"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    images: PathBuf,
    texts: PathBuf,
    pool: PathBuf,
    n: usize,
}

fn clean_fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = SyntheticSpec {
        n_pairs: 40,
        dim_latent: 8,
        dim_embed: 16,
        noise_std: 0.0,
        corrupt_fraction: 0.0,
        seed: 3,
    };
    let syn = generate_synthetic(&spec).unwrap();
    let (images, texts, pool) = (root.join("img.emb"), root.join("txt.emb"), root.join("pool.emb"));
    write_embeddings(&syn.data.image_embeddings, &images).unwrap();
    write_embeddings(&syn.data.text_embeddings, &texts).unwrap();
    write_embeddings(&syn.pool.embeddings, &pool).unwrap();
    Fixture {
        _dir: dir,
        root,
        images,
        texts,
        pool,
        n: spec.n_pairs,
    }
}

fn filter_args<'a>(f: &'a Fixture, manifest: &'a Path, report: &'a Path) -> Vec<&'a str> {
    vec![
        "filter",
        "--images",
        s(&f.images),
        "--texts",
        s(&f.texts),
        "--distractors",
        s(&f.pool),
        "--manifest",
        s(manifest),
        "--report",
        s(report),
    ]
}

#[test]
fn param_count_matches_formula() {
    let o = wora(&["param-count", "--dims", "1024x1024", "--rank", "8", "--kind", "wora"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().next().unwrap() == "17410 trainable", "{}", stdout(&o));

    let o = wora(&["param-count", "--dims", "1024x1024", "--rank", "8", "--kind", "lora"]);
    assert!(stdout(&o).starts_with("16384 trainable"));
}

#[test]
fn param_count_rejects_bad_rank() {
    let o = wora(&["param-count", "--dims", "4x4", "--rank", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fails_on_zero_tolerance() {
    let o = wora(&["gradcheck", "--dims", "8x6", "--rank", "2", "--tol", "1e-4", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    for p in ["b", "a", "mag", "alpha", "beta"] {
        assert!(stdout(&o).lines().any(|l| l.starts_with(p)), "missing {p}");
    }

    let o = wora(&["gradcheck", "--dims", "8x6", "--rank", "2", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("failed"));
}

#[test]
fn gradcheck_output_is_deterministic() {
    let args = ["gradcheck", "--seed", "9", "--instances", "4"];
    assert_eq!(wora(&args).stdout, wora(&args).stdout);
}

#[test]
fn filter_keeps_every_clean_pair() {
    let f = clean_fixture();
    let (m, r) = (f.root.join("m.jsonl"), f.root.join("r.json"));
    let mut args = filter_args(&f, &m, &r);
    args.extend(["--rank-threshold", "1", "--distractor-count", "100"]);
    let o = wora(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("retained {0}/{0} (100.0%)", f.n));
    assert_eq!(wora::embio::read_manifest(&m).unwrap().len(), f.n);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(report["retained"], f.n);
}

#[test]
fn filter_defaults_are_fifty_and_ten_thousand() {
    let f = clean_fixture();
    let big_pool = EmbeddingMatrix::with_row_ids(Matrix::from_fn(10_000, 16, |i, j| ((i * 31 + j * 7) % 13) as f64 - 6.0));
    write_embeddings(&big_pool, &f.pool).unwrap();
    let (m, r) = (f.root.join("m.jsonl"), f.root.join("r.json"));
    let o = wora(&filter_args(&f, &m, &r));
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(report["config"]["rank_threshold"], 50);
    assert_eq!(report["config"]["distractor_count"], 10_000);
}

#[test]
fn filter_small_pool_is_config_error() {
    let f = clean_fixture();
    let (m, r) = (f.root.join("m.jsonl"), f.root.join("r.json"));
    let o = wora(&filter_args(&f, &m, &r));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!m.exists() && !r.exists());
}

#[test]
fn filter_missing_file_exits_three_with_path() {
    let f = clean_fixture();
    fs::remove_file(&f.texts).unwrap();
    let (m, r) = (f.root.join("m.jsonl"), f.root.join("r.json"));
    let o = wora(&filter_args(&f, &m, &r));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(s(&f.texts)), "{}", stderr(&o));
}

#[test]
fn filter_corrupt_header_exits_three() {
    let f = clean_fixture();
    let mut bytes = fs::read(&f.images).unwrap();
    bytes[0] = b'X';
    fs::write(&f.images, bytes).unwrap();
    let (m, r) = (f.root.join("m.jsonl"), f.root.join("r.json"));
    assert_eq!(wora(&filter_args(&f, &m, &r)).status.code(), Some(3));
}

#[test]
fn filter_is_byte_identical_across_runs_and_threads() {
    let f = clean_fixture();
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "4"].iter().enumerate() {
        let (m, r) = (f.root.join(format!("m{i}.jsonl")), f.root.join(format!("r{i}.json")));
        let mut args = filter_args(&f, &m, &r);
        args.extend(["--distractor-count", "150", "--per-pair", "--seed", "5", "--threads", threads]);
        assert!(wora(&args).status.success());
        outputs.push((fs::read(&m).unwrap(), fs::read(&r).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn flags_override_config_file() {
    let f = clean_fixture();
    let cfg = f.root.join("run.cfg");
    fs::write(&cfg, "# loose stage\nrank_threshold = 1800\ndistractor_count = 120\n").unwrap();
    let (m, r) = (f.root.join("m.jsonl"), f.root.join("r.json"));

    let mut args = filter_args(&f, &m, &r);
    args.extend(["--config", s(&cfg)]);
    assert!(wora(&args).status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(report["config"]["rank_threshold"], 1800);
    assert_eq!(report["config"]["distractor_count"], 120);

    args.extend(["--rank-threshold", "3"]);
    assert!(wora(&args).status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(report["config"]["rank_threshold"], 3);
    assert_eq!(report["config"]["distractor_count"], 120);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "rank = 4\nunknown_key = 1\n").unwrap();
    let o = wora(&["param-count", "--dims", "16x16", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown_key"));

    fs::write(&cfg, "rank 4\n").unwrap();
    let o = wora(&["param-count", "--dims", "16x16", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let o = wora(&["param-count", "--dims", "16by16"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn merge_of_init_checkpoint_reproduces_base() {
    let dir = tempfile::tempdir().unwrap();
    let w0 = Matrix::from_fn(6, 5, |i, j| (i as f64 - 2.5) * 0.25 + j as f64 * 0.5);
    let ckpt = dir.path().join("ckpt");
    for kind in AdapterKind::ALL {
        save_checkpoint(&init_adapter(w0.clone(), 2, kind, 11).unwrap(), &ckpt).unwrap();
        let out = dir.path().join(format!("{kind}.emb"));
        let o = wora(&["merge", "--checkpoint", s(&ckpt), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let merged = read_matrix(&out).unwrap();
        assert!(merged.max_abs_diff(&w0) < 1e-6, "{kind}");
    }
}

#[test]
fn eval_self_retrieval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gallery = EmbeddingMatrix::with_row_ids(Matrix::from_fn(30, 8, |i, j| if i % 8 == j { 1.0 + i as f64 } else { 0.1 * (i + j) as f64 }));
    let path = dir.path().join("g.emb");
    write_embeddings(&gallery, &path).unwrap();
    let o = wora(&["eval", "--queries", s(&path), "--gallery", s(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["recall"]["1"], 1.0);
    assert_eq!(v["recall"]["10"], 1.0);
    assert_eq!(v["map"], 1.0);
    assert_eq!(v["queries"], 30);
}

#[test]
fn eval_dim_mismatch_is_error() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.emb"), dir.path().join("b.emb"));
    write_matrix(&Matrix::identity(4), &a).unwrap();
    write_matrix(&Matrix::identity(5), &b).unwrap();
    let o = wora(&["eval", "--queries", s(&a), "--gallery", s(&b)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_toy_and_rank_sweep_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    fs::write(&cfg, "n_pairs = 200\ndistractor_count = 300\n").unwrap();
    let out = dir.path().join("res.json");
    let o = wora(&[
        "train-toy", "--config", s(&cfg), "--method", "wora", "--rank", "4", "--seed", "2", "--epochs", "1", "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["method"], "wora");
    assert_eq!(v["rank"], 4);
    assert!(v["recall"]["1"].as_f64().unwrap() > 0.0);

    let (json, csv) = (dir.path().join("sweep.json"), dir.path().join("sweep.csv"));
    let o = wora(&[
        "rank-sweep", "--config", s(&cfg), "--ranks", "2,4", "--epochs", "1", "--out", s(&json), "--csv", s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn train_toy_rejects_bad_corrupt_fraction() {
    let o = wora(&["train-toy", "--corrupt-fraction", "1.5", "--out", "/nonexistent/x.json"]);
    assert_eq!(o.status.code(), Some(2));
}
