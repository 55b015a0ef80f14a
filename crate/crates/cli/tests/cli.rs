use std::path::Path;
use std::process::{Command, Output};

fn hcma(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hcma"));
    cmd.args(args).env_remove("HCMA_SEED").env_remove("HCMA_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 3
dtype = "f64"

[model]
stage_widths = [4, 8]
mism_stages = [2]

[loss]
num_negatives = 8
boundary_dilations = 1
negative_dilations = 1

[data]
extent = 8
synthetic_count = 2

[train]
steps = 2
patch = [8, 8, 8]
"#;

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(hcma(&[], &[]).status.code(), Some(1));
    assert_eq!(hcma(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(hcma(&["verify", "--only", "11"], &[]).status.code(), Some(1));
    assert_eq!(hcma(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn bad_environment_overrides_exit_with_one() {
    let o = hcma(&["stats"], &[("HCMA_SEED", "minus one")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("HCMA_SEED"));
    assert_eq!(hcma(&["stats"], &[("HCMA_THREADS", "0")]).status.code(), Some(1));
    assert_eq!(hcma(&["stats"], &[("HCMA_THREADS", "2")]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\npatch = [7, 8, 8]\n").unwrap();
    let o = hcma(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.patch"));
    std::fs::write(&cfg, "[train]\nnot_a_key = 1\n").unwrap();
    assert_eq!(hcma(&["train", "--config", cfg.to_str().unwrap()], &[]).status.code(), Some(1));
}

#[test]
fn stats_reports_reference_figures() {
    let o = hcma(&["stats", "--preset", "full"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("2.87") && text.contains("126.44"), "{text}");
    let o = hcma(&["stats", "--json", "--input", "32", "32", "32"], &[]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["params"], 538_866);
}

#[test]
fn verify_single_suite_passes() {
    let o = hcma(&["verify", "--only", "7"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("[PASS]  7."));
}

#[test]
fn gen_data_train_resume_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let data = p("data");
    let o = hcma(&["gen-data", "--out", &data, "--count", "2", "--extent", "8"], &[("HCMA_SEED", "5")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(&data).unwrap().count(), 6);
    assert_eq!(hcma(&["gen-data", "--out", &data, "--extent", "7"], &[]).status.code(), Some(1));

    std::fs::write(p("tiny.toml"), TINY).unwrap();
    let o = hcma(&["train", "--config", &p("tiny.toml"), "--out", &p("a.ckpt")], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("step=2 "));

    let o = hcma(&["train", "--resume", &p("a.ckpt"), "--steps", "3", "--out", &p("b.ckpt")], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("step=3 "));
    assert!(Path::new(&p("b.ckpt")).exists());

    let o = hcma(&["eval", &p("b.ckpt"), "--data", &data, "--json"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["cases"].as_array().unwrap().len(), 2);
    assert!(v["mean"]["dice"].as_f64().unwrap() >= 0.0);

    std::fs::write(p("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(hcma(&["eval", &p("junk.ckpt")], &[]).status.code(), Some(1));
}
