use std::path::Path;
use std::process::Command;

use metacon::harness;
use metacon::metrics::Aggregation;

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

#[test]
fn report_matches_golden_file() {
    let out = tempfile::tempdir().unwrap();
    let r = harness::report(&fixtures().join("report_runs"), out.path(), Aggregation::PerSeed).unwrap();
    let got = std::fs::read(out.path().join("report.csv")).unwrap();
    let want = std::fs::read(fixtures().join("report_golden.csv")).unwrap();
    assert_eq!(String::from_utf8(got).unwrap(), String::from_utf8(want).unwrap());
    assert!(r.cells.iter().any(|c| !c.defined()));
    assert!(r.cells.iter().any(|c| c.c_rate == 100.0));
    for f in ["summary.csv", "heatmap_rl2_ga_c_score.svg", "heatmap_varibad_default_c_rate.svg"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
}

#[test]
fn oracle_script_reproduces_golden_file() {
    let script = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/oracle/report_oracle.py"));
    let Ok(o) = Command::new("python3").arg(script).arg("report").arg(fixtures().join("report_runs")).output() else {
        eprintln!("python3 unavailable; skipping");
        return;
    };
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let want = std::fs::read_to_string(fixtures().join("report_golden.csv")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), want);
}

#[test]
fn mean_curve_aggregation_differs_only_in_values() {
    let out = tempfile::tempdir().unwrap();
    let a = harness::report(&fixtures().join("report_runs"), out.path(), Aggregation::PerSeed).unwrap();
    let b = harness::report(&fixtures().join("report_runs"), out.path(), Aggregation::MeanCurve).unwrap();
    assert_eq!(a.cells.len(), b.cells.len());
    for (x, y) in a.cells.iter().zip(&b.cells) {
        assert_eq!((x.algo, x.mode, &x.train_space, &x.test_space), (y.algo, y.mode, &y.train_space, &y.test_space));
        assert_eq!(x.seed_scores, y.seed_scores);
    }
}
