use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mtcmtm"));
    c.env_remove("MTCMTM_OUT");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, schema: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"[data]
csv = "d/data.csv"
schema = "d/{schema}"

[model]
projection_dim = 8

[model.tabular]
stem_channels = 4
stem_len = 4
n_blocks = 1
cbam_reduction = 2

[model.image]
hidden = 8
feature_dim = 8

[pretrain]
epochs = 1

[finetune]
epochs = 2
{extra}"#
    );
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn synth(dir: &Path) {
    let o = run(&["synth", "--n", "120", "--seed", "2", "--out", "d"], dir);
    assert_eq!(code(&o), 0, "{o:?}");
}

fn only_entry(dir: &Path) -> PathBuf {
    let entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries[0].clone()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["--help"], dir.path())), 0);
    assert_eq!(code(&run(&["--version"], dir.path())), 0);
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&run(&["pretrain"], dir.path())), 1);
    assert_eq!(code(&run(&["gradcheck", "--repeats", "0"], dir.path())), 1);
}

#[test]
fn config_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nbogus = 1\n").unwrap();
    let o = run(&["pretrain", "--config", "bad.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    write_config(dir.path(), "c.toml", "schema_regression.txt", "");
    // the data directory does not exist yet
    assert_eq!(code(&run(&["pretrain", "--config", "c.toml"], dir.path())), 2);
    assert_eq!(code(&run(&["eval", "--model", "missing.ckpt", "--data", "c.toml"], dir.path())), 2);
    synth(dir.path());
    let o = run(&["ablate", "--config", "c.toml", "--rows", "scratch,bogus"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    write_config(
        dir.path(),
        "c.toml",
        "schema_regression.txt",
        "\n[optim]\nlr = 1e30\nschedule = \"constant\"\n",
    );
    let o = run(&["finetune", "--config", "c.toml", "--out", "o"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    write_config(d, "c.toml", "schema_regression.txt", "");

    let o = run(&["stats", "--config", "c.toml"], d);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("param_count"));

    assert_eq!(code(&run(&["pretrain", "--config", "c.toml", "--out", "o"], d)), 0);
    let pre_dir = only_entry(&d.join("o"));
    let name = pre_dir.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("pretrain-"));
    assert!(pre_dir.join("config.toml").exists());
    assert!(pre_dir.join("pretrain-seed0-log.csv").exists());
    let ck = pre_dir.join("pretrain-seed0.ckpt");

    let o = run(&["finetune", "--config", "c.toml", "--from", ck.to_str().unwrap(), "--out", "f"], d);
    assert_eq!(code(&o), 0);
    let ft_dir = only_entry(&d.join("f"));
    let metrics = std::fs::read_to_string(ft_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("seed,split,best_epoch,mse,mae"));
    let model = ft_dir.join("model-seed0.ckpt");

    let o = run(&["eval", "--model", model.to_str().unwrap(), "--data", "c.toml", "--out", "e"], d);
    assert_eq!(code(&o), 0);
    let eval = std::fs::read_to_string(only_entry(&d.join("e")).join("eval.csv")).unwrap();
    let test_line = metrics.lines().find(|l| l.contains(",test,")).unwrap();
    let eval_line = eval.lines().nth(1).unwrap();
    // same metrics, bit for bit, after the model round-trips through disk
    assert_eq!(test_line.split(',').skip(3).collect::<Vec<_>>(), eval_line.split(',').skip(3).collect::<Vec<_>>());

    write_config(d, "cls.toml", "schema_classification.txt", "");
    let o = run(&["eval", "--model", model.to_str().unwrap(), "--data", "cls.toml"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_writes_reports_and_honours_out_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    write_config(d, "c.toml", "schema_regression.txt", "");
    let o = bin()
        .args([
            "ablate",
            "--config",
            "c.toml",
            "--rows",
            "scratch,mt_cmtm",
            "--train-fraction",
            "0.5",
            "--schema",
            "d/schema_classification.txt",
        ])
        .env("MTCMTM_OUT", d.join("env_out"))
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = only_entry(&d.join("env_out"));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.lines().skip(1).all(|l| l.contains(",0.5,")));
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.contains("task: schema_regression") && table.contains("task: schema_classification"));
    assert!(std::fs::read_to_string(out.join("config.toml")).unwrap().contains("train_fraction = 0.5"));
}

#[test]
fn repeated_runs_give_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    write_config(d, "c.toml", "schema_regression.txt", "");
    for out in ["a", "b"] {
        assert_eq!(code(&run(&["finetune", "--config", "c.toml", "--out", out], d)), 0);
    }
    let (a, b) = (only_entry(&d.join("a")), only_entry(&d.join("b")));
    assert_eq!(a.file_name(), b.file_name());
    for f in ["metrics.csv", "model-seed0.ckpt", "config.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--seed", "1", "--repeats", "1"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("checks passed"));
}
