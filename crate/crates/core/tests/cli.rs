use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vlmdiff");

const TINY: &str = r#"
seed = 1
output_dir = "out"

[dataset]
root = "data"
resolution = [32, 32]

[dataset.synth]
n_train = 6
n_test_normal = 2
n_test_anomalous = 2
resolution = [32, 32]

[ae]
channels = [8, 8, 8]
epochs = 1
generic_images = 8
generic_epochs = 1
batch = 4
lr = 2e-3

[diff]
T = 20
train_steps = 3
batch = 2
channels = [8]
heads = 2
steps = 2

[segmentation.extractor]
patch = 4
channels = 8
"#;

fn vlmdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(vlmdiff(d, &["synth"]).status.code(), Some(1));
    assert_eq!(vlmdiff(d, &["frobnicate", "--config", "run.toml"]).status.code(), Some(1));
    assert_eq!(vlmdiff(d, &["--help"]).status.code(), Some(0));

    let o = vlmdiff(d, &["synth", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.toml"));

    let o = vlmdiff(d, &["synth", "--config", "run.toml", "--set", "diff.nonsense=1"]);
    assert_eq!(o.status.code(), Some(1));

    // Validation happens before anything is written.
    let o = vlmdiff(d, &["synth", "--config", "run.toml", "--set", "segmentation.extractor.backend=vit"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("vit"), "{}", stderr(&o));
    assert!(!d.join("data").exists() && !d.join("out").exists());
}

#[test]
fn eval_before_infer_names_the_missing_step() {
    let dir = setup();
    let d = dir.path();
    for c in ["synth", "caption", "train-ae", "train-diff"] {
        let o = vlmdiff(d, &[c, "--config", "run.toml"]);
        assert!(o.status.success(), "{c}: {}", stderr(&o));
    }
    let o = vlmdiff(d, &["eval", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("anomaly maps not found; run infer"), "{}", stderr(&o));
}

fn infer_conditions(run_log: &Path) -> Vec<(String, String)> {
    let text = std::fs::read_to_string(run_log).unwrap();
    let last_infer = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .rfind(|v| v["command"] == "infer")
        .expect("an infer entry");
    last_infer["details"]["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| (i["key"].as_str().unwrap().to_string(), i["condition"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn natural_mode_conditions_inference_and_logs_it() {
    let dir = setup();
    let d = dir.path();
    let run = |args: &[&str]| {
        let o = vlmdiff(d, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["synth", "--config", "run.toml"]);
    for c in ["caption", "train-ae", "train-diff", "infer"] {
        run(&[c, "--config", "run.toml"]);
    }
    let industrial = infer_conditions(&d.join("out/run.log"));
    assert_eq!(industrial.len(), 4);
    assert!(industrial.iter().all(|(_, c)| c == "null"));

    for c in ["caption", "train-diff", "infer"] {
        run(&[c, "--config", "run.toml", "--mode", "natural"]);
    }
    let natural = infer_conditions(&d.join("out/run.log"));
    assert!(natural.iter().all(|(_, c)| c == "caption"));

    let o = run(&["eval", "--config", "run.toml", "--mode", "natural"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("roc_i=") && stdout.contains("pro="));
    run(&["report", "--config", "run.toml", "--mode", "natural"]);

    let log = std::fs::read_to_string(d.join("out/run.log")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["config_hash"].is_string() && v["seed"] == 1);
        if v["command"] == "infer" {
            assert_eq!(v["inputs"].as_object().unwrap().len(), if v["mode"] == "natural" { 4 } else { 3 });
        }
    }
    let sheets = d.join("out/report");
    let n = walk_png(&sheets);
    assert_eq!(n, 4);
}

fn walk_png(dir: &Path) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += walk_png(&p);
        } else if p.extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    n
}
