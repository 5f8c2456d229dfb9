use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 11
[data]
n_contents = 4
n_styles = 3
samples_per_cell = 6
unseen_styles = 1
content_dim = 4
obs_dim = 8
target_dim = 8
[train]
epochs = 2
batch_size = 16
[train.optimizer]
lr = 0.01
[train.model.encoder]
d_model = 8
blocks = 1
heads = 2
style_dim = 3
ff_width = 8
tokens = 2
[train.model.decoder]
anchor_dim = 8
blocks = 1
heads = 2
ff_width = 8
lora_rank = 2
max_shots = 4
[train.model.probe]
steps = 60
[eval]
n_pairs = 100
shots = [1, 2, 4]
trials = 30
table_shots = 2
"#;

fn styleshift(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleshift"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("STYLESHIFT_OUT", out)
        .output()
        .expect("binary runs")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn stderr_record(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().last().expect("stderr has a record")).expect("last stderr line is JSON")
}

fn ok(o: Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let (dir, cfg) = setup();
    let o = styleshift(dir.path(), &cfg, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_record(&o)["error"]["kind"], "usage");
}

#[test]
fn invalid_config_lists_every_key() {
    let (dir, _) = setup();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "colour = 1\n[train]\nepochs = 0\n[train.loss]\ntau = -1.0\nwhat = 2\n").unwrap();
    let o = styleshift(dir.path(), &cfg, &["train"]);
    assert_eq!(o.status.code(), Some(1));
    let rec = stderr_record(&o);
    assert_eq!(rec["error"]["kind"], "validation");
    let errors = rec["error"]["errors"].as_array().unwrap();
    let joined = serde_json::to_string(errors).unwrap();
    assert!(joined.contains("colour") && joined.contains("train.loss.what"), "{joined}");
}

#[test]
fn eval_before_train_names_the_missing_checkpoint() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    ok(styleshift(&out, &cfg, &["gen-data"]));
    let o = styleshift(&out, &cfg, &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    let rec = stderr_record(&o);
    assert_eq!(rec["error"]["kind"], "dependency");
    assert!(rec["error"]["missing"].as_str().unwrap().ends_with("checkpoint.bin"));
    assert!(!out.join("eval").exists());
}

#[test]
fn second_gen_data_reports_unchanged() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    assert_eq!(ok(styleshift(&out, &cfg, &["gen-data"]))["status"], "written");
    let again = ok(styleshift(&out, &cfg, &["gen-data"]));
    assert_eq!(again["status"], "unchanged");
}

fn full_pipeline(out: &Path, cfg: &Path) {
    for stage in ["gen-data", "train", "eval", "fewshot", "ablate", "report"] {
        ok(styleshift(out, cfg, &[stage]));
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_emits_tables_and_is_byte_reproducible() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    full_pipeline(&a, &cfg);
    full_pipeline(&b, &cfg);
    for t in ["ablation.csv", "style_generalization.csv", "shot_curve.csv", "disentanglement.csv", "report.json", "plot_data.json"] {
        assert!(a.join("report").join(t).exists(), "{t} missing");
    }
    let shots = std::fs::read_to_string(a.join("report/shot_curve.csv")).unwrap();
    assert_eq!(shots.lines().next(), Some("shots,accuracy,similarity"));
    assert_eq!(shots.lines().count(), 4);
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    for f in &files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn resolved_config_echo_reproduces_training() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(styleshift(&a, &cfg, &["gen-data"]));
    ok(styleshift(&a, &cfg, &["train"]));
    let echo = a.join("train/resolved_config.toml");
    ok(styleshift(&b, &echo, &["gen-data"]));
    ok(styleshift(&b, &echo, &["train"]));
    for f in ["train/checkpoint.bin", "train/metrics.csv", "data/dataset.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn set_overrides_change_the_run() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    ok(styleshift(&out, &cfg, &["gen-data", "--set", "data.noise_std=0.2"]));
    let echo = std::fs::read_to_string(out.join("data/resolved_config.toml")).unwrap();
    assert!(echo.contains("noise_std = 0.2"), "{echo}");
}
