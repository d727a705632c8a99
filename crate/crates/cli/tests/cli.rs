use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset]
train_stride = 16
train_ids = [0, 1]
val_ids = [2]
test_ids = [3]

[dataset.synthetic]
classes = 3
subjects = 4
channels = 2
steps_per_recording = 128
recordings_per_pair = 1
severity = 0.5
window = 32

[model.sensor]
per_channel_blocks = 1
merged_blocks = 1
convs_per_block = 2
per_channel_growth = 4
merged_growth = 4

[train]
epochs = 2
early_stop_patience = 0

[invariance.train]
epochs = 2
"#;

fn adanorm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adanorm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_then_eval_diagnose_and_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    for cmd in ["train", "eval", "diagnose", "invariance"] {
        let o = adanorm(&[cmd, "--config", &cfg, "--out", "run"], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{cmd} failed: {}", stderr(&o));
        assert!(tmp.path().join(format!("run/manifest-{cmd}.json")).exists());
    }
    let run = tmp.path().join("run");
    let acc = std::fs::read_to_string(run.join("accuracy.csv")).unwrap();
    let lines: Vec<&str> = acc.lines().collect();
    assert_eq!(lines[0], "scheme,averaging,statistic,accuracy");
    // One batch-trained checkpoint yields both the running-statistics row
    // and the adaptive row.
    assert!(lines[1].starts_with("non_adaptive,batch,mean_std,"), "{acc}");
    assert!(lines[2].starts_with("adaptive,batch,mean_std,"), "{acc}");
    assert_eq!(lines.len(), 3);
    assert!(run.join("diagnose/summary.csv").exists());
    let inv = std::fs::read_to_string(run.join("invariance.csv")).unwrap();
    assert_eq!(inv.lines().count(), 3, "{inv}");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,lr,train_loss,val_acc"));
}

#[test]
fn artifacts_regenerate_bit_identically_from_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = adanorm(&["train", "--config", &cfg, "--out", "a"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a/manifest-train.json")).unwrap()).unwrap();
    let echo = manifest["config"].as_str().unwrap().replace("out_dir = \"a\"", "out_dir = \"b\"");
    std::fs::write(tmp.path().join("echo.toml"), echo).unwrap();
    let o = adanorm(&["train", "--config", "echo.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["checkpoint.anrm", "history.csv"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between the original run and its manifest rerun");
    }
}

#[test]
fn gen_data_writes_splits_and_sample_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = adanorm(&["gen-data", "--config", &cfg, "--out", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["train.anrm", "val.anrm", "test.anrm", "probe.anrm", "samples.csv"] {
        assert!(tmp.path().join("d/data").join(f).exists(), "missing {f}");
    }
    let m = std::fs::read_to_string(tmp.path().join("d/manifest-gen-data.json")).unwrap();
    assert!(m.contains("\"git_describe\"") && m.contains("train.anrm"), "{m}");
}

#[test]
fn eval_without_checkpoint_exits_1_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = adanorm(&["eval", "--config", &cfg, "--out", "empty"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint.anrm"), "{}", stderr(&o));
}

#[test]
fn excluded_normalization_exits_1_citing_the_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[norm]\nscheme = \"non_adaptive\"\naveraging = \"instance\"\nstatistic = \"mean_std\"\n");
    let cfg = write_config(tmp.path(), &text);
    let o = adanorm(&["train", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("non_adaptive normalization cannot use instance averaging"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_arguments_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nepochz = 3\n");
    let o = adanorm(&["train", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
    assert_eq!(adanorm(&["transmogrify"], tmp.path()).status.code(), Some(1));
    assert_eq!(adanorm(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn instance_checkpoint_reports_only_the_instance_scheme() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "{TINY}\n[norm]\nscheme = \"adaptive\"\naveraging = \"instance\"\nstatistic = \"mean_std\"\n"
    )
    .replace("[train]\n", "[train]\neval_scheme = \"adaptive_instance\"\n");
    let cfg = write_config(tmp.path(), &text);
    for cmd in ["train", "eval"] {
        let o = adanorm(&[cmd, "--config", &cfg, "--out", "r"], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let acc = std::fs::read_to_string(tmp.path().join("r/accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 2, "{acc}");
    assert!(acc.lines().nth(1).unwrap().starts_with("adaptive,instance,mean_std,"));
}
