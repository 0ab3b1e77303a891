use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"
seed = 3
seeds = 2

[gen]
train_size = 300
test_size = 100
n_items = 40
n_categories = 5
n_cities = 4
n_shops = 5
n_tags = 4

[layout]
item_width = 4
category_width = 2
position_width = 2
max_seq_len = 5
field_width = 2
cross_width = 2
cross_table_size = 40

[model]
heads = 2
mlp_hidden = [8, 8, 4]

[train]
epochs = 2

[bench]
examples = 20
repetitions = 1
"#;

fn bst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bst"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bst(args);
    assert!(
        out.status.success(),
        "bst {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("toy.toml"), TOY).unwrap();
        Toy { dir }
    }

    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> String {
        s(&self.path("toy.toml")).to_string()
    }

    fn gen(&self, out: &str) {
        ok(&["gen", "--config", &self.config(), "--out", s(&self.path(out))]);
    }

    fn train(&self, model: &str, out: &str) {
        self.gen("data");
        ok(&[
            "train",
            "--config",
            &self.config(),
            "--model",
            model,
            "--data",
            s(&self.path("data")),
            "--out",
            s(&self.path(out)),
        ]);
    }
}

#[test]
fn gen_is_reproducible_and_creates_directories() {
    let toy = Toy::new();
    toy.gen("a/nested");
    toy.gen("b");
    for f in ["train.jsonl", "test.jsonl"] {
        let a = fs::read(toy.path("a/nested").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(toy.path("b").join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(toy.path("b/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["config"]["gen"]["seed"], 3);
    let lines = fs::read_to_string(toy.path("b/train.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 300);
}

#[test]
fn seed_flag_overrides_config() {
    let toy = Toy::new();
    toy.gen("a");
    ok(&["gen", "--config", &toy.config(), "--seed", "4", "--out", s(&toy.path("b"))]);
    assert_ne!(
        fs::read(toy.path("a/train.jsonl")).unwrap(),
        fs::read(toy.path("b/train.jsonl")).unwrap()
    );
}

#[test]
fn invalid_generator_config_fails_with_one_line() {
    let toy = Toy::new();
    let bad = toy.path("bad.toml");
    fs::write(&bad, "[gen]\nnoise = 0.7\n").unwrap();
    let out = bst(&["gen", "--config", s(&bad), "--out", s(&toy.path("x"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("noise"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let toy = Toy::new();
    let bad = toy.path("bad.toml");
    fs::write(&bad, "[model]\nlayers = 3\n").unwrap();
    let out = bst(&["gen", "--config", s(&bad), "--out", s(&toy.path("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("layers"));
}

#[test]
fn train_writes_checkpoint_and_one_loss_row_per_epoch() {
    let toy = Toy::new();
    toy.train("bst", "run1");
    toy.train("bst", "run2");
    let loss = fs::read_to_string(toy.path("run1/loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("epoch,loss"));
    assert_eq!(lines.count(), 2);
    assert_eq!(
        fs::read(toy.path("run1/model.ckpt")).unwrap(),
        fs::read(toy.path("run2/model.ckpt")).unwrap()
    );
    assert!(toy.path("run1/manifest.json").exists());
}

#[test]
fn train_without_data_names_the_problem() {
    let toy = Toy::new();
    let out = bst(&["train", "--config", &toy.config(), "--out", s(&toy.path("m"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

fn parse_metrics(csv: &str) -> Vec<String> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,auc,logloss,rt_mean_ms,rt_p95_ms,n"));
    let row: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    assert_eq!(row.len(), 6);
    assert!(lines.next().is_none());
    row
}

#[test]
fn eval_prints_and_writes_metrics() {
    let toy = Toy::new();
    toy.train("din_lite", "m");
    let ckpt = toy.path("m/model.ckpt");
    let data = toy.path("data");
    let first = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let second = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let a = parse_metrics(&first);
    let b = parse_metrics(&second);
    assert_eq!(a[0], "DIN");
    assert_eq!(a[1], b[1]);
    let auc: f64 = a[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(a[3].is_empty() && a[4].is_empty());
    assert_eq!(a[5], "100");
    assert_eq!(fs::read_to_string(toy.path("m/metrics.csv")).unwrap(), first);

    let benched = parse_metrics(&ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--bench"]));
    assert!(benched[3].parse::<f64>().unwrap() > 0.0);
    assert!(benched[4].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn eval_rejects_a_mismatched_architecture() {
    let toy = Toy::new();
    toy.train("wdl", "m");
    let out = bst(&[
        "eval",
        "--config",
        &toy.config(),
        "--model",
        "bst",
        "--checkpoint",
        s(&toy.path("m/model.ckpt")),
        "--data",
        s(&toy.path("data")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.ckpt"), "{err}");
}

#[test]
fn compare_writes_per_seed_rows_and_a_six_row_summary() {
    let toy = Toy::new();
    toy.gen("data");
    let run = |out: &str| {
        ok(&[
            "compare",
            "--config",
            &toy.config(),
            "--data",
            s(&toy.path("data")),
            "--out",
            s(&toy.path(out)),
        ])
    };
    let printed = run("c1");
    run("c2");
    let summary = fs::read_to_string(toy.path("c1/summary.csv")).unwrap();
    assert_eq!(printed, summary);
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "model,offline_auc,average_rt_ms");
    let models: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(models, ["WDL", "WDL(+Seq)", "DIN", "BST(b=1)", "BST(b=2)", "BST(b=3)"]);

    let runs = fs::read_to_string(toy.path("c1/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 6 * 2);
    assert!(runs.lines().nth(1).unwrap().starts_with("WDL,3,"));
    assert!(runs.lines().nth(7).unwrap().starts_with("WDL,4,"));
    assert_eq!(runs, fs::read_to_string(toy.path("c2/runs.csv")).unwrap());
}

#[test]
fn gradcheck_passes_on_the_small_models() {
    let out = ok(&["gradcheck"]);
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().all(|l| l.contains(": ok,")), "{out}");
    let one = ok(&["gradcheck", "--model", "wdl_seq"]);
    assert!(one.starts_with("WDL(+Seq): ok"));
}

#[test]
fn bad_model_kind_is_a_usage_error() {
    let out = bst(&["train", "--model", "gru", "--out", "/tmp/never"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gru"));
}
