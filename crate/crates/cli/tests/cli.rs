use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
n = 500

[sweep]
deltas = [0.0, 1.0]
c_alphas = [5.0]
c_sigmas = [0.8]
seeds = [0, 1]
n = 1000
n_eval = 1000
svg = true

[sweep.train]
steps = 20
batch_size = 64
d = 3

[align]
deltas = [0.0, 1.0]
n = 1000
n_eval = 1000

[align.train]
steps = 20
batch_size = 64
d = 3

[ope]
seeds = [0, 1]
n = 2000
deltas = [0.01]
"#;

fn augspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augspec")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_in(dir: &Path, cmd: &str, config: &str, sub: &str) -> (Output, std::path::PathBuf) {
    let out = dir.join(sub);
    let o = augspec(&[cmd, "--config", config, "--out", out.to_str().unwrap(), "--jobs", "2"]);
    (o, out)
}

#[test]
fn every_command_succeeds_and_writes_its_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    for (cmd, files) in [
        ("synth", &["dataset.csv", "metadata.json"][..]),
        ("sweep", &["sweep.csv", "sweep.svg"][..]),
        ("align", &["align.csv", "selection.csv", "align.svg"][..]),
        ("ope", &["ope_trace.csv", "ope_summary.csv"][..]),
    ] {
        let (o, out) = run_in(tmp.path(), cmd, &cfg, cmd);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files.iter().chain(&["resolved_config.toml"]) {
            assert!(out.join(f).is_file(), "{cmd} did not write {f}");
        }
    }
}

#[test]
fn synth_writes_header_plus_n_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (o, out) = run_in(tmp.path(), "synth", &cfg, "s");
    assert!(o.status.success());
    let text = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 501);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    for (cmd, file) in [("sweep", "sweep.csv"), ("ope", "ope_summary.csv"), ("ope", "ope_trace.csv"), ("align", "align.csv")] {
        let (_, a) = run_in(tmp.path(), cmd, &cfg, &format!("{cmd}_a"));
        let (_, b) = run_in(tmp.path(), cmd, &cfg, &format!("{cmd}_b"));
        let fa = std::fs::read(a.join(file)).unwrap();
        let fb = std::fs::read(b.join(file)).unwrap();
        assert_eq!(fa, fb, "{cmd}/{file} differs between runs");
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (o, first) = run_in(tmp.path(), "sweep", &cfg, "first");
    assert!(o.status.success());
    let resolved = first.join("resolved_config.toml");
    let (o, second) = run_in(tmp.path(), "sweep", resolved.to_str().unwrap(), "second");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(first.join("sweep.csv")).unwrap(),
        std::fs::read(second.join("sweep.csv")).unwrap()
    );
    let a = std::fs::read_to_string(resolved).unwrap();
    let b = std::fs::read_to_string(second.join("resolved_config.toml")).unwrap();
    assert_eq!(a.replace("first", "second"), b);
}

#[test]
fn failing_cells_exit_with_two_and_keep_going() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("c_sigmas = [0.8]", "c_sigmas = [0.8, 1.5]");
    let cfg = write_config(tmp.path(), &text);
    let (o, out) = run_in(tmp.path(), "sweep", &cfg, "bad");
    assert_eq!(o.status.code(), Some(2));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().filter(|r| r.ends_with(',')).count(), 4);
    assert!(rows.iter().any(|r| r.contains("synth:")));
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[sweep]\nno_such_key = 1\n");
    let (o, _) = run_in(tmp.path(), "sweep", &cfg, "x");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid config"));

    let cfg = write_config(tmp.path(), "[sweep]\ndeltas = []\n");
    let (o, _) = run_in(tmp.path(), "sweep", &cfg, "y");
    assert_eq!(o.status.code(), Some(1));

    let o = augspec(&["synth", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
