//! End-to-end tests of the `seqanomaly` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqanomaly"))
}

fn run_cmd(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 45 normal and 5 anomalous sequences: a 30/20 split with 10% anomalies.
const SYNTH_TABLE: &str = r#"
p = 2
min_len = 4
max_len = 8
n_normal = 45
n_anomalous = 5
normal = { mean = 0.0, variance = 1.0, phi = 0.5 }
anomalous = { mean = 0.0, variance = 10.0, phi = 0.0 }
"#;

const TRAIN_TABLE: &str = r#"
[train]
hidden = 3
mu = 0.1
lambda = 0.3
max_outer_iters = 15
"#;

fn synth_experiment(dir: &Path, extra: &str) -> PathBuf {
    let synth = SYNTH_TABLE.trim();
    let text = format!("seed = 11\n\n[data.synth]\n{synth}\n{TRAIN_TABLE}\n{extra}\n");
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn run_is_reproducible_and_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_experiment(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(out), "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(o.stdout.is_empty() && o.stderr.is_empty(), "--quiet prints nothing");
    }
    for name in ["model.json", "roc.csv", "scores.csv", "summary.json"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name} differs between runs");
    }
    let timing: serde_json::Value = serde_json::from_str(&read(&a.join("timing.json"))).unwrap();
    assert!(timing["wall_seconds"].as_f64().unwrap() >= 0.0);

    let summary: serde_json::Value = serde_json::from_str(&read(&a.join("summary.json"))).unwrap();
    let auc = summary["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(summary["n_train"], 30);
    assert_eq!(summary["n_test"], 20);
    assert_eq!(summary["n_test_anomalous"], 2);
    assert_eq!(summary["config"]["seed"], 11);
    assert_eq!(summary["config"]["train"]["hidden"], 3);
    assert!(summary["training"]["trace"].as_array().unwrap().len() >= 2);
    assert!(summary.get("wall_seconds").is_none());

    let scores = read(&a.join("scores.csv"));
    let mut lines = scores.lines();
    assert_eq!(lines.next(), Some("id,score,label_pred,label"));
    assert_eq!(lines.count(), 20);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_experiment(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&a), "--quiet"]).status.success());
    let o = run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&b), "--seed", "12", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(read(&a.join("model.json")), read(&b.join("model.json")));
    let summary: serde_json::Value = serde_json::from_str(&read(&b.join("summary.json"))).unwrap();
    assert_eq!(summary["config"]["seed"], 12);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_experiment(dir.path(), "");
    std::fs::write(&cfg, read(&cfg).replace("hidden = 3", "hiden = 3")).unwrap();
    let o = run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hiden"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_dataset_reports_path() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "[data]\npath = \"nowhere/data.jsonl\"\n").unwrap();
    let o = run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("nowhere/data.jsonl"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_four_without_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_experiment(dir.path(), "");
    std::fs::write(&cfg, read(&cfg).replace("mu = 0.1", "mu = 1e6")).unwrap();
    let out = dir.path().join("o");
    let o = run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(!out.join("model.json").exists());
    assert!(!out.join("summary.json").exists());
}

#[test]
fn synth_then_run_matches_inline_synth() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("gen.toml");
    std::fs::write(&spec, SYNTH_TABLE).unwrap();
    let data = dir.path().join("data.jsonl");
    let o = run_cmd(&["synth", "--config", path_str(&spec), "--seed", "11", "--out", path_str(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&data).lines().count(), 50);

    let from_file = dir.path().join("file.toml");
    std::fs::write(&from_file, format!("seed = 11\n[data]\npath = \"data.jsonl\"\n{TRAIN_TABLE}")).unwrap();
    let inline = synth_experiment(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_cmd(&["run", "--config", path_str(&from_file), "--out", path_str(&a), "--quiet"]).status.success());
    assert!(run_cmd(&["run", "--config", path_str(&inline), "--out", path_str(&b), "--quiet"]).status.success());
    assert_eq!(read(&a.join("model.json")), read(&b.join("model.json")));
    assert_eq!(read(&a.join("scores.csv")), read(&b.join("scores.csv")));
}

#[test]
fn score_reproduces_run_scores_for_every_head() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("gen.toml");
    std::fs::write(&spec, SYNTH_TABLE).unwrap();
    let data = dir.path().join("data.jsonl");
    assert!(run_cmd(&["synth", "--config", path_str(&spec), "--seed", "5", "--out", path_str(&data)]).status.success());

    let heads = [
        ("gradient", "hyperplane", "hyperplane"),
        ("gradient", "sphere", "sphere"),
        ("qp", "hyperplane", "hyperplane_dual"),
        ("qp", "sphere", "sphere_dual"),
    ];
    for (method, head, tag) in heads {
        let cfg = dir.path().join(format!("{method}-{head}.toml"));
        std::fs::write(
            &cfg,
            format!("seed = 5\n[data]\npath = \"data.jsonl\"\n{TRAIN_TABLE}method = \"{method}\"\nhead = \"{head}\"\n"),
        )
        .unwrap();
        let out = dir.path().join(format!("{method}-{head}"));
        let o = run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&out), "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let model: serde_json::Value = serde_json::from_str(&read(&out.join("model.json"))).unwrap();
        assert_eq!(model["detector"]["head"]["type"], tag);

        let scored = out.join("all.csv");
        let model_path = out.join("model.json");
        let o = run_cmd(&["score", path_str(&model_path), path_str(&data), "--out", path_str(&scored)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let all = read(&scored);
        assert!(all.starts_with("id,score,label_pred\n"));
        let by_id: std::collections::HashMap<&str, (&str, &str)> = all
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0], (f[1], f[2]))
            })
            .collect();
        assert_eq!(by_id.len(), 50);
        for line in read(&out.join("scores.csv")).lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(by_id[f[0]], (f[1], f[2]), "{method}/{head} item {}", f[0]);
        }
    }
}

#[test]
fn scoring_training_file_of_separable_run_recovers_labels() {
    // identical flat normal sequences and wildly oscillating anomalies
    let dir = TempDir::new().unwrap();
    let mut text = String::new();
    for i in 0..45 {
        text.push_str(&format!("{{\"id\":\"n{i}\",\"values\":[[0.1,0.2],[0.1,0.2],[0.1,0.2],[0.1,0.2]],\"label\":1}}\n"));
    }
    for i in 0..5 {
        let a = 5.0 + i as f64;
        text.push_str(&format!(
            "{{\"id\":\"a{i}\",\"values\":[[{a},-{a}],[-{a},{a}],[{a},{a}],[-{a},-{a}]],\"label\":-1}}\n"
        ));
    }
    let data = dir.path().join("sep.jsonl");
    std::fs::write(&data, &text).unwrap();
    let cfg = dir.path().join("sep.toml");
    std::fs::write(
        &cfg,
        "[data]\npath = \"sep.jsonl\"\n[train]\nhead = \"sphere\"\nhidden = 3\nlambda = 0.5\nmu = 0.1\nmax_outer_iters = 200\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&out), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run_cmd(&["score", path_str(&out.join("model.json")), path_str(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let expected = if f[0].starts_with('n') { "1" } else { "-1" };
        assert_eq!(f[2], expected, "{line}");
    }
}

#[test]
fn score_handles_empty_and_mismatched_data() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_experiment(dir.path(), "");
    let out = dir.path().join("o");
    assert!(run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&out), "--quiet"]).status.success());
    let model = out.join("model.json");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = run_cmd(&["score", path_str(&model), path_str(&empty)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "id,score,label_pred\n");

    let wide = dir.path().join("wide.jsonl");
    std::fs::write(&wide, "{\"values\":[[1,2,3],[4,5,6]]}\n").unwrap();
    let o = run_cmd(&["score", path_str(&model), path_str(&wide)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("features"), "{}", stderr(&o));
}

#[test]
fn roc_subcommand_reproduces_run_curve() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_experiment(dir.path(), "");
    let out = dir.path().join("o");
    assert!(run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&out), "--quiet"]).status.success());
    let roc = dir.path().join("roc.csv");
    let o = run_cmd(&["roc", path_str(&out.join("scores.csv")), "--out", path_str(&roc)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&roc), read(&out.join("roc.csv")));
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    let auc = summary["auc"].as_f64().unwrap();
    assert!(stderr(&o).contains(&format!("AUC {auc:.4}")), "{}", stderr(&o));
}

#[test]
fn crossval_grid_is_recorded() {
    let dir = TempDir::new().unwrap();
    let cfg = synth_experiment(dir.path(), "[crossval]\ngrid = [{ lambda = 0.2 }, { lambda = 0.5, head = \"sphere\" }]\n");
    let out = dir.path().join("o");
    let o = run_cmd(&["run", "--config", path_str(&cfg), "--out", path_str(&out), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    let entries = summary["crossval"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let best = summary["crossval"]["best_index"].as_u64().unwrap() as usize;
    let best_auc = entries[best]["mean_auc"].as_f64().unwrap();
    assert!(entries.iter().all(|e| e["mean_auc"].as_f64().unwrap() <= best_auc));
    assert_eq!(summary["config"]["crossval_grid"][1]["head"], "sphere");
}

#[test]
fn bad_usage_is_a_config_error() {
    let o = run_cmd(&["run"]);
    assert_eq!(o.status.code(), Some(2));
}
