use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rerank_core::checkpoint;
use rerank_core::corpus::Dataset;
use rerank_core::encoder::EncoderConfig;
use rerank_core::ltr::HeadKind;
use rerank_core::model::RankModel;
use rerank_core::params::ParamSet;
use rerank_core::synthetic::{generate, SyntheticConfig};
use rerank_core::tokenizer::Vocabulary;
use tempfile::TempDir;

const CONFIG: &str = r#"
[retrieval]
k = 5

[encoder]
num_layers = 1
hidden_dim = 16
num_heads = 2
ffn_dim = 32
max_seq_len = 32
dropout_rate = 0.1

[train]
seq_len = 24
epochs = 2
batch_size = 4

[eval]
folds = 3
"#;

/// A toy corpus plus one query that matches nothing.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let c = generate(&SyntheticConfig {
        num_queries: 12,
        candidates_per_query: 5,
        query_words: 3,
        passage_words: 6,
        vocabulary_words: 40,
        max_negative_overlap: 1,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let p = dir.path();
    c.dataset
        .save(p.join("queries.jsonl"), p.join("passages.jsonl"), p.join("qrels.tsv"))
        .unwrap();
    let mut q = fs::read_to_string(p.join("queries.jsonl")).unwrap();
    q.push_str("{\"id\":\"nomatch\",\"text\":\"zebra\"}\n");
    fs::write(p.join("queries.jsonl"), q).unwrap();
    fs::write(p.join("exp.toml"), CONFIG).unwrap();
    dir
}

fn rerank(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("exp.toml");
    Command::new(env!("CARGO_BIN_EXE_rerank"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[track_caller]
fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[track_caller]
fn fails(out: Output) -> String {
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Run-file lines grouped by query: passage ids in file order.
fn run_order(path: &Path) -> BTreeMap<String, Vec<String>> {
    let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in fs::read_to_string(path).unwrap().lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        m.entry(f[0].to_string()).or_default().push(f[2].to_string());
    }
    m
}

fn retrieved(dir: &Path) -> PathBuf {
    ok(rerank(dir, &["index"]));
    ok(rerank(dir, &["retrieve"]));
    dir.join("out")
}

#[test]
fn index_is_byte_stable_and_guarded() {
    let d = fixture();
    ok(rerank(d.path(), &["index"]));
    ok(rerank(d.path(), &["index", "--out", "again"]));
    let a = fs::read(d.path().join("out/index.bm25")).unwrap();
    assert_eq!(a, fs::read(d.path().join("again/index.bm25")).unwrap());

    let err = fails(rerank(d.path(), &["index"]));
    assert!(err.contains("--force"), "{err}");
    ok(rerank(d.path(), &["index", "--force"]));
    assert_eq!(a, fs::read(d.path().join("out/index.bm25")).unwrap());
}

#[test]
fn missing_input_names_the_path() {
    let d = fixture();
    fs::remove_file(d.path().join("passages.jsonl")).unwrap();
    let err = fails(rerank(d.path(), &["index"]));
    assert!(err.contains("passages.jsonl"), "{err}");
    // a failed command leaves nothing that blocks a retry
    fs::write(d.path().join("passages.jsonl"), "{\"id\":\"p\",\"text\":\"x\"}\n").unwrap();
    ok(rerank(d.path(), &["index"]));

    let out = Command::new(env!("CARGO_BIN_EXE_rerank"))
        .args(["--config", "nowhere.toml", "index"])
        .current_dir(d.path())
        .output()
        .unwrap();
    let err = fails(out);
    assert!(err.contains("nowhere.toml"), "{err}");
}

#[test]
fn retrieve_depth_empty_queries_and_determinism() {
    let d = fixture();
    let out = retrieved(d.path());
    let runs = run_order(&out.join("candidates.run"));
    assert_eq!(runs.len(), 12);
    assert!(runs.values().all(|v| !v.is_empty() && v.len() <= 5));
    assert!(!runs.contains_key("nomatch"));

    let again = ok(rerank(d.path(), &["retrieve", "--force"]));
    assert!(stderr(&again).contains("nomatch"), "expected a warning for the empty query");
    let first = fs::read(out.join("candidates.run")).unwrap();
    ok(rerank(d.path(), &["retrieve", "--force"]));
    assert_eq!(first, fs::read(out.join("candidates.run")).unwrap());

    ok(rerank(d.path(), &["retrieve", "--force", "--k", "2", "--query", "q0003"]));
    let runs = run_order(&out.join("candidates.run"));
    assert_eq!(runs.keys().collect::<Vec<_>>(), ["q0003"]);
    assert_eq!(runs["q0003"].len(), 2);

    let err = fails(rerank(d.path(), &["retrieve", "--force", "--query", "q9", "--query", "q8"]));
    assert!(err.contains("q9") && err.contains("q8"), "{err}");
}

#[test]
fn presets_and_config_echo() {
    let d = fixture();
    ok(rerank(d.path(), &["index"]));
    ok(rerank(d.path(), &["--preset", "nfl6", "--seed", "7", "retrieve"]));
    let echo = fs::read_to_string(d.path().join("out/retrieve.config.toml")).unwrap();
    assert!(echo.contains("k = 10"), "{echo}");
    assert!(echo.contains("neg_per_pos_cap = 2"), "{echo}");
    assert!(echo.contains("seed = 7"), "{echo}");

    ok(rerank(d.path(), &["--preset", "nfl6", "build-examples"]));
    let ex = fs::read_to_string(d.path().join("out/examples.tsv")).unwrap();
    let mut per_query: BTreeMap<&str, usize> = BTreeMap::new();
    for line in ex.lines().skip(1) {
        *per_query.entry(line.split('\t').next().unwrap()).or_default() += 1;
    }
    // one positive per query, so at most two triplets
    assert!(per_query.values().all(|&n| n <= 2), "{per_query:?}");

    ok(rerank(d.path(), &["--preset", "webap", "--force", "build-examples"]));
    let ex = fs::read_to_string(d.path().join("out/examples.tsv")).unwrap();
    assert!(ex.lines().skip(1).filter(|l| l.starts_with("q0000\t")).count() > 2);
}

#[test]
fn manifest_hashes_match_outputs() {
    let d = fixture();
    let out = retrieved(d.path());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    for name in ["index.bm25", "index.config.toml", "candidates.run", "retrieve.config.toml"] {
        let entry = &files[name];
        let bytes = fs::read(out.join(name)).unwrap();
        assert_eq!(entry["bytes"].as_u64().unwrap(), bytes.len() as u64);
        let sha = rerank_cli::manifest::sha256_file(&out.join(name)).unwrap().0;
        assert_eq!(entry["sha256"].as_str().unwrap(), sha);
    }
}

#[test]
fn train_rejects_zero_epochs() {
    let d = fixture();
    retrieved(d.path());
    let err = fails(rerank(d.path(), &["train", "--epochs", "0"]));
    assert!(err.contains("epochs"), "{err}");
}

#[test]
fn resume_continues_bit_for_bit() {
    let d = fixture();
    retrieved(d.path());
    let cands = ["--candidates", "out/candidates.run"];
    ok(rerank(d.path(), &[&["train", "--out", "half", "--epochs", "1"][..], &cands].concat()));
    let half = d.path().join("half/model.ckpt");
    let (_, st) = checkpoint::load(&half).unwrap();
    let half_steps = st.unwrap().adam.step;
    let half = half.to_str().unwrap();
    ok(rerank(d.path(), &[&["train", "--out", "r1", "--resume", half][..], &cands].concat()));
    ok(rerank(d.path(), &[&["train", "--out", "r2", "--resume", half][..], &cands].concat()));

    let r1 = fs::read(d.path().join("r1/model.ckpt")).unwrap();
    assert_eq!(r1, fs::read(d.path().join("r2/model.ckpt")).unwrap());
    let loss = fs::read_to_string(d.path().join("r1/loss.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
    assert!(loss.lines().nth(1).unwrap().starts_with("2\t"));

    let (_, state) = checkpoint::load(d.path().join("r1/model.ckpt")).unwrap();
    let state = state.unwrap();
    assert_eq!(state.epochs_done, 2);
    assert_eq!(state.adam.step, 2 * half_steps);
    let err = fails(rerank(
        d.path(),
        &[&["train", "--out", "again", "--resume", half, "--epochs", "1"][..], &cands].concat(),
    ));
    assert!(err.contains("already"), "{err}");
}

/// A checkpoint whose head gives every passage the same score.
fn constant_checkpoint(dir: &Path) -> PathBuf {
    let c = dir;
    let ds = Dataset::load(c.join("queries.jsonl"), c.join("passages.jsonl"), c.join("qrels.tsv")).unwrap();
    let texts: Vec<&str> = ds
        .queries()
        .iter()
        .map(|q| q.text.as_str())
        .chain(ds.passages().iter().map(|p| p.text.as_str()))
        .collect();
    let vocab = Vocabulary::build(texts, 8192, 1).unwrap();
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 32,
        vocab_size: vocab.len(),
        ..EncoderConfig::default()
    };
    let mut model = RankModel::new(cfg, HeadKind::Bertlets, None, 8).unwrap();
    for t in model.tensors_mut() {
        if t.name == "head.v" {
            t.data.fill(0.0);
        }
    }
    let ckdir = dir.join("zero");
    fs::create_dir_all(&ckdir).unwrap();
    vocab.save(ckdir.join("vocab.txt")).unwrap();
    let path = ckdir.join("model.ckpt");
    checkpoint::save(&path, &model, None).unwrap();
    path
}

#[test]
fn constant_scores_keep_first_stage_order() {
    let d = fixture();
    let out = retrieved(d.path());
    let ck = constant_checkpoint(d.path());
    ok(rerank(d.path(), &["rerank", "--checkpoint", ck.to_str().unwrap()]));
    assert_eq!(run_order(&out.join("rerank.run")), run_order(&out.join("candidates.run")));
}

#[test]
fn segmentation_flag_routes_to_the_segmented_scorer() {
    let d = fixture();
    let out = retrieved(d.path());
    ok(rerank(d.path(), &["train", "--epochs", "1"]));
    ok(rerank(d.path(), &["rerank"]));
    let plain = fs::read_to_string(out.join("rerank.run")).unwrap();
    assert!(plain.lines().all(|l| l.ends_with(" bertlets")));

    for (flag, tag) in [("2x16", "bertlets-2x16-attention"), ("2x16:max", "bertlets-2x16-max")] {
        ok(rerank(d.path(), &["rerank", "--force", "--seg", flag]));
        let seg = fs::read_to_string(out.join("rerank.run")).unwrap();
        assert!(seg.lines().all(|l| l.ends_with(tag)), "{flag}");
        assert_eq!(run_order(&out.join("rerank.run")).len(), 12);
    }
    let err = fails(rerank(d.path(), &["rerank", "--force", "--seg", "2x64"]));
    assert!(err.contains("max_seq_len"), "{err}");
}

#[test]
fn gold_injection_puts_a_relevant_passage_in_every_list() {
    let d = fixture();
    let out = retrieved(d.path());
    ok(rerank(d.path(), &["train", "--epochs", "1"]));
    // first-stage lists holding a single non-relevant passage each
    let negatives: String = (0..12)
        .map(|q| format!("q{q:04} Q0 q{q:04}-p03 1 1.0 neg\n"))
        .collect();
    let cands = d.path().join("negatives.run");
    fs::write(&cands, negatives).unwrap();
    let cands = cands.to_str().unwrap();

    ok(rerank(d.path(), &["rerank", "--candidates", cands]));
    let plain = run_order(&out.join("rerank.run"));
    assert!(plain.values().all(|ps| ps.len() == 1 && ps[0].ends_with("-p03")));

    ok(rerank(d.path(), &["rerank", "--force", "--candidates", cands, "--inject-gold"]));
    let runs = run_order(&out.join("rerank.run"));
    assert_eq!(runs.len(), 12);
    for (q, ps) in &runs {
        let mut sorted = ps.clone();
        sorted.sort();
        assert_eq!(sorted, [format!("{q}-p00"), format!("{q}-p03")]);
    }
}

#[test]
fn missing_checkpoint_fails() {
    let d = fixture();
    retrieved(d.path());
    let err = fails(rerank(d.path(), &["rerank", "--checkpoint", "absent.ckpt"]));
    assert!(err.contains("absent.ckpt"), "{err}");
}

const TOY_QRELS: &str = "a\ta2\t1\na\ta5\t2\nb\tb1\t1\nc\tc9\t1\n";
const TOY_RUN: &str = "\
a Q0 a1 1 9.0 t
a Q0 a2 2 8.0 t
a Q0 a3 3 7.0 t
a Q0 a5 4 6.0 t
b Q0 b1 1 3.0 t
b Q0 b2 2 2.0 t
c Q0 c1 1 1.0 t
";

fn toy_eval_dir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut passages = String::new();
    for id in ["a1", "a2", "a3", "a5", "b1", "b2", "c1", "c9"] {
        passages.push_str(&format!("{{\"id\":\"{id}\",\"text\":\"x\"}}\n"));
    }
    fs::write(p.join("passages.jsonl"), passages).unwrap();
    fs::write(
        p.join("queries.jsonl"),
        "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"x\"}\n{\"id\":\"c\",\"text\":\"x\"}\n",
    )
    .unwrap();
    fs::write(p.join("qrels.tsv"), TOY_QRELS).unwrap();
    fs::write(p.join("toy.run"), TOY_RUN).unwrap();
    fs::write(p.join("exp.toml"), "").unwrap();
    dir
}

/// Brute-force metrics straight from the definitions.
fn oracle(flags: &[bool], total: usize) -> (f64, f64, f64) {
    let p1 = if flags.first() == Some(&true) { 1.0 } else { 0.0 };
    let mut ap = 0.0;
    for (i, &r) in flags.iter().enumerate() {
        if r {
            let hits = flags[..=i].iter().filter(|&&x| x).count();
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    let rr = flags.iter().position(|&r| r).map_or(0.0, |i| 1.0 / (i + 1) as f64);
    (p1, ap / total as f64, rr)
}

#[test]
fn eval_matches_the_oracle() {
    let d = toy_eval_dir();
    let run = d.path().join("toy.run");
    let out = ok(rerank(d.path(), &["eval", "--run", run.to_str().unwrap()]));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().next().unwrap(), "run\tP@1\tMAP\tMRR\tqueries");

    let lists = [
        oracle(&[false, true, false, true], 2),
        oracle(&[true, false], 1),
        oracle(&[false], 1),
    ];
    let mean = |f: fn(&(f64, f64, f64)) -> f64| lists.iter().map(f).sum::<f64>() / 3.0;
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("out/metrics.json")).unwrap()).unwrap();
    assert!((json["p_at_1"].as_f64().unwrap() - mean(|x| x.0)).abs() < 1e-12);
    assert!((json["map"].as_f64().unwrap() - mean(|x| x.1)).abs() < 1e-12);
    assert!((json["mrr"].as_f64().unwrap() - mean(|x| x.2)).abs() < 1e-12);
    assert_eq!(
        table.lines().nth(1).unwrap(),
        format!("toy.run\t{:.4}\t{:.4}\t{:.4}\t3", mean(|x| x.0), mean(|x| x.1), mean(|x| x.2))
    );
}

#[test]
fn eval_metric_selection_and_unknown_ids() {
    let d = toy_eval_dir();
    let run = d.path().join("toy.run");
    let out = ok(rerank(d.path(), &["eval", "--run", run.to_str().unwrap(), "--metric", "map"]));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().next().unwrap(), "run\tMAP\tqueries");
    assert!(table.lines().all(|l| l.split('\t').count() == 3));

    let bad = d.path().join("bad.run");
    fs::write(&bad, format!("{TOY_RUN}zz Q0 a1 1 1.0 t\nyy Q0 a1 1 1.0 t\n")).unwrap();
    let err = fails(rerank(d.path(), &["eval", "--force", "--run", bad.to_str().unwrap()]));
    assert!(err.contains("zz") && err.contains("yy"), "{err}");
}

#[test]
fn sweep_is_deterministic_and_validated() {
    let d = fixture();
    let err = fails(rerank(d.path(), &["sweep", "--seq-lens", "16,64"]));
    assert!(err.contains("64") && err.contains("max_seq_len"), "{err}");
    assert!(!d.path().join("out/sweep.tsv").exists());

    let a = ok(rerank(d.path(), &["sweep", "--seq-lens", "16,24", "--out", "s1"]));
    ok(rerank(d.path(), &["sweep", "--seq-lens", "16,24", "--out", "s2"]));
    let t1 = fs::read(d.path().join("s1/sweep.tsv")).unwrap();
    assert_eq!(t1, fs::read(d.path().join("s2/sweep.tsv")).unwrap());
    let text = String::from_utf8(t1).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("16\t") && rows[2].starts_with("24\t"));
    assert_eq!(String::from_utf8(a.stdout).unwrap(), text);
}
