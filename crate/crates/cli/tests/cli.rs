//! Subcommand smoke tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn csds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csds")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
run_id = "tiny"
[model]
base_width = 4
depth = 2
[train.schedule]
epochs = 1
batch_size = 2
[augment]
elastic_alpha = 2.0
elastic_sigma = 4.0
[data]
count = 12
[data.synth]
size = 16
"#;

#[test]
fn unknown_config_key_is_a_one_line_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train.ema]\nbeta = 0.5\n").unwrap();
    let out = csds(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"], "schema");
    assert!(v["message"].as_str().unwrap().contains("train.ema.beta"));
}

#[test]
fn missing_checkpoint_reports_io() {
    let dir = tempfile::tempdir().unwrap();
    let out = csds(&["eval", "--checkpoint", path(&dir.path().join("none.ckpt")), "--data", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "io");
}

#[test]
fn generate_train_evaluate_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();

    let data = root.join("data");
    assert!(csds(&["gen-data", "--config", path(&cfg), "--out", path(&data)]).status.success());
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 12);
    assert!(data.join("splits.json").exists());

    let run = root.join("run");
    let out = csds(&["train", "--config", path(&cfg), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "run.json", "best_student.ckpt", "best_student.ckpt.json", "teacher.ckpt", "splits.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("best_student.ckpt");
    let eval_csv = root.join("eval.csv");
    assert!(csds(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--out", path(&eval_csv)]).status.success());
    assert_eq!(std::fs::read_to_string(&eval_csv).unwrap().lines().count(), 13);

    let image = data.join("images/synth_00000.png");
    let unc = root.join("unc");
    assert!(csds(&["uncertainty", "--checkpoint", path(&ckpt), "--image", path(&image), "--out", path(&unc)]).status.success());
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(unc.join("uncertainty.json")).unwrap()).unwrap();
    for stage in ["base", "color", "structure"] {
        assert!(unc.join(format!("uncertainty_{stage}.png")).exists());
        assert!(stats[stage]["max"].as_f64().unwrap() <= stats["scale"].as_f64().unwrap());
    }
    assert!(stats["structure"]["mean"].as_f64().unwrap() >= stats["base"]["mean"].as_f64().unwrap());

    let flat_cfg = root.join("flat.toml");
    std::fs::write(&flat_cfg, format!("{TINY}\n[uncertainty]\nlambda_color = 0.0\nlambda_structure = 0.0\n")).unwrap();
    let flat = root.join("flat");
    let args = ["uncertainty", "--checkpoint", path(&ckpt), "--image", path(&image), "--config", path(&flat_cfg), "--out", path(&flat)];
    assert!(csds(&args).status.success());
    let read = |stage: &str| std::fs::read(flat.join(format!("uncertainty_{stage}.png"))).unwrap();
    assert_eq!(read("base"), read("color"));
    assert_eq!(read("base"), read("structure"));

    let aug = root.join("aug");
    let reference = data.join("images/synth_00001.png");
    let args = ["augment-preview", "--image", path(&image), "--reference", path(&reference), "--out", path(&aug)];
    assert!(csds(&args).status.success());
    for f in ["color_jitter.png", "histogram_match.png", "elastic.png"] {
        assert!(aug.join(f).exists(), "missing {f}");
    }

    let report = root.join("report");
    assert!(csds(&["report", path(&run), "--out", path(&report)]).status.success());
    let text = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(text.contains("tiny"));
}
