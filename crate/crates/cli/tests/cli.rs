use std::path::Path;
use std::process::{Command, Output};

fn qot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qot")).current_dir(dir).args(args).output().expect("spawn qot")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn body(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
}

#[test]
fn constants_table_for_d1() {
    let dir = tempfile::tempdir().unwrap();
    let o = qot(dir.path(), &["constants", "--d", "1", "--out", "k"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("1.885618"), "{s}");
    assert!(s.contains("1.310371"), "{s}");
    let csv = std::fs::read_to_string(dir.path().join("k/constants.csv")).unwrap();
    assert!(csv.starts_with("# qot "));
    assert!(csv.contains("# command = constants"));
}

#[test]
fn malformed_eps_flag_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = qot(dir.path(), &["sweep", "--eps", "1e-2,oops"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("eps") && e.contains("oops"), "{e}");
}

#[test]
fn malformed_config_file_reports_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "command = \"solve\"\nn = 100\neps = \"nope\"\n").unwrap();
    let o = qot(dir.path(), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("eps") && e.contains("line 3"), "{e}");

    std::fs::write(&cfg, "command = \"solve\"\nbogus = 1\n").unwrap();
    let o = qot(dir.path(), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn short_sweep_rejected_before_solving() {
    let dir = tempfile::tempdir().unwrap();
    let o = qot(dir.path(), &["sweep", "--eps", "1e-2,1e-3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn underresolved_eps_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = qot(dir.path(), &["sweep", "--n", "50", "--eps", "1e-2,1e-3,1e-4"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "n = 1000\neps = 1e-2\noutput_dir = \"a\"\n").unwrap();
    let o = qot(dir.path(), &["solve", "--config", cfg.to_str().unwrap(), "--n", "120"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats = std::fs::read_to_string(dir.path().join("a/stats.txt")).unwrap();
    assert!(stats.contains("# n = 120"), "{stats}");
}

#[test]
fn solve_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["r1", "r2"] {
        let o = qot(dir.path(), &["solve", "--n", "150", "--eps", "5e-3", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["plan.csv", "potentials.csv", "cross_section.csv", "stats.txt"] {
        let a = std::fs::read(dir.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("r2").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn small_sweep_writes_report_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let o = qot(dir.path(), &["sweep", "--n", "600", "--eps", "1e-2:1e-3:3log", "--out", "s"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = dir.path().join("s");
    let csv = body(&s.join("rate_report.csv"));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("eps,value,dual"));
    assert_eq!(lines.count(), 3);
    let summary = std::fs::read_to_string(s.join("rate_report_summary.txt")).unwrap();
    assert!(summary.contains("fitted_exponent"));
    let svg = std::fs::read_to_string(s.join("rate_report.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));

    // the plot subcommand reproduces the figure from the CSV alone
    let out = s.join("again.svg");
    let o = qot(
        dir.path(),
        &["plot", "--input", "s/rate_report.csv", "--kind", "scaled-gap", "--output", out.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(out).unwrap(), svg.into_bytes());
}

#[test]
fn pme_check_reports_second_order_residual() {
    let dir = tempfile::tempdir().unwrap();
    let o = qot(dir.path(), &["pme-check", "--n", "300", "--out", "p"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let txt = std::fs::read_to_string(dir.path().join("p/pme_check.txt")).unwrap();
    let ratio: f64 = txt
        .lines()
        .find_map(|l| l.strip_prefix("residual_ratio = "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
}

#[test]
fn couple_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = qot(dir.path(), &["couple", "--n", "1000", "--eps", "1e-3", "--delta", "0.1", "--out", "c"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let txt = std::fs::read_to_string(dir.path().join("c/couple_summary.txt")).unwrap();
    let defect: f64 = txt
        .lines()
        .find_map(|l| l.strip_prefix("row_defect = "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(defect < 1e-3, "{defect}");
}
