use std::path::Path;
use std::process::Command;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures");

fn metacon() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metacon"))
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        let dest = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_dir(&p, &dest);
        } else {
            std::fs::copy(&p, &dest).unwrap();
        }
    }
}

#[test]
fn report_reproduces_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&Path::new(FIXTURES).join("report_runs"), dir.path());
    let o = metacon().arg("report").arg("--out").arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = std::fs::read(dir.path().join("report/report.csv")).unwrap();
    assert_eq!(got, std::fs::read(Path::new(FIXTURES).join("report_golden.csv")).unwrap());
    assert!(String::from_utf8_lossy(&o.stdout).contains("OOD c_score"));
}

#[test]
fn fd_suite_passes() {
    let o = metacon().arg("fd-suite").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("pass ")).count(), 8, "{text}");
}

#[test]
fn unknown_keys_fail() {
    let o = metacon().args(["meta-train", "--train-space", "nav_dense:north"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    let o = metacon().args(["adapt", "--mode", "finetune"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn adapt_needs_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = metacon()
        .args(["adapt", "--mode", "ga", "--train-space", "nav_dense:left", "--test-space", "nav_dense:right", "--workers", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));
}

#[test]
fn config_file_is_copied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "algo = \"rl2\"\nseeds = 1\ntrain_spaces = [\"nav_dense:left\"]\n[budgets]\nmeta_train_frames = 1\n").unwrap();
    let out = dir.path().join("run");
    let o = metacon().args(["meta-train", "--workers", "1", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let copied = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(copied.contains("algo = \"rl2\""));
    assert!(out.join("meta_train/rl2/nav_dense-left/0/ckpt.bin").exists());
}
