use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SPEC: &str = "classes = 2\ndim = 4\ntrain_per_class = 60\n\
                    test_normal_per_class = 20\ntest_anomaly_per_class = 20\n";

const CONFIG: &str = r#"
[train]
epochs = 2
warmup_epochs = 1
intra_centers = 2
eval_every = 1
lr_drop_epochs = []

[flow]
blocks = 2
hidden = 16
pos_dim = 0
"#;

fn hgad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgad")).args(args).output().expect("spawn hgad")
}

fn ok(args: &[&str]) -> String {
    let out = hgad(args);
    assert!(
        out.status.success(),
        "hgad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes spec/config files and synthesizes data into `dir/data`.
fn setup(dir: &Path, spec: &str) {
    fs::write(dir.join("spec.toml"), spec).unwrap();
    fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    ok(&["synth", "--spec", s(&dir.join("spec.toml")), "--out", s(&dir.join("data"))]);
}

fn train_and_eval(dir: &Path, tag: &str) -> (Vec<u8>, String) {
    let model = dir.join(format!("model-{tag}"));
    let eval = dir.join(format!("eval-{tag}"));
    ok(&[
        "train",
        "--deterministic",
        "--config",
        s(&dir.join("cfg.toml")),
        "--data",
        s(&dir.join("data/train.hgf1")),
        "--test",
        s(&dir.join("data/test.hgf1")),
        "--out",
        s(&model),
    ]);
    ok(&[
        "eval",
        "--deterministic",
        "--checkpoint",
        s(&model.join("checkpoint.hgad")),
        "--data",
        s(&dir.join("data/test.hgf1")),
        "--out",
        s(&eval),
    ]);
    (
        fs::read(model.join("checkpoint.hgad")).unwrap(),
        fs::read_to_string(eval.join("report.txt")).unwrap(),
    )
}

#[test]
fn full_pipeline_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, SPEC);
    let (_, report) = train_and_eval(dir, "a");
    assert!(report.contains("image_auroc: 0."), "{report}");

    let metrics = fs::read_to_string(dir.join("model-a/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,level,l_g,l_mi,l_e,l_in,total,lr,auroc"));
    assert_eq!(lines.count(), 2);

    let scores = fs::read_to_string(dir.join("eval-a/scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("image_id,class,label_is_anomalous,image_score"));
    assert_eq!(scores.lines().count(), 1 + 80);
    let hist = fs::read_to_string(dir.join("eval-a/histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 50);
    let maps = fs::read(dir.join("eval-a/score_maps.bin")).unwrap();
    assert_eq!(&maps[..4], b"HGSM");
    assert_eq!(maps.len(), 20 + 80 * 4);

    let manifest = fs::read_to_string(dir.join("eval-a/manifest.json")).unwrap();
    for key in ["\"config_hash\"", "\"seed\"", "\"engine_version\"", "report.txt"] {
        assert!(manifest.contains(key), "manifest lacks {key}");
    }

    let cmp = dir.join("cmp");
    let text = ok(&[
        "compare",
        "--deterministic",
        "--config",
        s(&dir.join("cfg.toml")),
        "--data",
        s(&dir.join("data/train.hgf1")),
        "--test",
        s(&dir.join("data/test.hgf1")),
        "--out",
        s(&cmp),
        "--variants",
        "SGC,full",
    ]);
    assert!(text.contains("SGC") && text.contains("full"));
    let csv = fs::read_to_string(cmp.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), SPEC);
    let (ckpt_a, report_a) = train_and_eval(tmp.path(), "a");
    let (ckpt_b, report_b) = train_and_eval(tmp.path(), "b");
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(report_a, report_b);
}

#[test]
fn single_class_report_has_one_auroc() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), &SPEC.replace("classes = 2", "classes = 1"));
    let (_, report) = train_and_eval(tmp.path(), "a");
    assert_eq!(report.matches("auroc").count(), 1, "{report}");
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.hgf1");
    let out = hgad(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(s(&missing)), "{stderr}");
}

#[test]
fn malformed_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 0\n").unwrap();
    fs::write(tmp.path().join("x.hgf1"), b"not a feature file").unwrap();
    let out = hgad(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&tmp.path().join("x.hgf1")),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
