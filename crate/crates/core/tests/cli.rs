use std::path::{Path, PathBuf};
use std::process::Command;

use epsim::cli::{run, EXIT_INVALID, EXIT_OK, EXIT_USAGE};

const SUBCOMMANDS: [&str; 7] = ["ingest", "model", "report", "simulate", "whatif", "schedule", "execute"];

fn epsim(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("epsim").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn data(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel).display().to_string()
}

fn check_golden(name: &str, actual: &str) {
    let path = golden_dir().join(format!("{name}.txt"));
    if std::env::var_os("EPSIM_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, want, "help text of '{name}' differs from {}", path.display());
}

#[test]
fn help_matches_golden_files() {
    let (code, out, _) = epsim(&["--help"]);
    assert_eq!(code, EXIT_OK);
    check_golden("epsim", &out);
    for sub in SUBCOMMANDS {
        let (code, out, _) = epsim(&[sub, "--help"]);
        assert_eq!(code, EXIT_OK);
        check_golden(sub, &out);
    }
}

#[test]
fn every_flag_is_documented() {
    for sub in SUBCOMMANDS {
        let (_, out, _) = epsim(&[sub, "--help"]);
        for line in out.lines().filter(|l| l.trim_start().starts_with('-')) {
            let trimmed = line.trim();
            let flag_end = trimmed.find("  ").unwrap_or_else(|| panic!("{sub}: undocumented flag line '{trimmed}'"));
            assert!(!trimmed[flag_end..].trim().is_empty(), "{sub}: undocumented '{trimmed}'");
        }
    }
}

#[test]
fn report_example() {
    let (code, out, err) = epsim(&["report", "--model", "bundled", "-n", "2", "-N", "22"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("computed total: 146535.8 kJ"), "{out}");
    assert!(out.contains("published (rounded) total for n=2, N=22: ≈ 146000 kJ"));
    assert!(err.contains("FirstGuess"));
}

#[test]
fn whatif_example() {
    let (code, out, _) = epsim(&["whatif", "--zero-category", "Forecast", "--path", "control"]);
    assert_eq!(code, EXIT_OK);
    let row = out.lines().find(|l| l.starts_with("Forecast")).unwrap();
    let v: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((v - 1.57).abs() < 0.01, "{row}");
    assert!(!out.contains("perturbed path"));
}

#[test]
fn simulate_example() {
    let (code, out, _) = epsim(&["simulate", "--nodes", "unlimited"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("makespan: 3536.2 s"), "{out}");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let cases: [&[&str]; 6] = [
        &["report", "--format", "json"],
        &["report", "--format", "csv", "-N", "42"],
        &["simulate", "--nodes", "40", "--format", "csv"],
        &["simulate", "--speedup", "Forecast=2", "--format", "json"],
        &["whatif", "--energy-factor", "DataAssimilation=0.5", "--N-prime", "42"],
        &["model"],
    ];
    for args in cases {
        let a = epsim(args);
        let b = epsim(args);
        assert_eq!(a.0, EXIT_OK, "{args:?}: {}", a.2);
        assert_eq!(a.1, b.1, "{args:?}");
    }
}

#[test]
fn model_file_round_trips_through_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("rmi_eps.json");
    let table = data("rmi_eps_table2.csv");
    let edges = data("rmi_eps_edges.json");
    let m = model.to_str().unwrap();
    let (code, _, err) = epsim(&["model", "--measurements", &table, "--edges", &edges, "-o", m]);
    assert_eq!(code, EXIT_OK, "{err}");
    let (_, from_file, _) = epsim(&["report", "--model", m, "--format", "json"]);
    let (_, bundled, _) = epsim(&["report", "--format", "json"]);
    assert_eq!(from_file, bundled);
    let (_, sim, _) = epsim(&["simulate", "--model", m]);
    assert!(sim.contains("makespan: 3536.2 s"));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("cycle.json");
    std::fs::write(
        &edges,
        r#"[{"from_job":"Bator","to_job":"Canari"},{"from_job":"Canari","to_job":"Bator"}]"#,
    )
    .unwrap();
    let table = data("rmi_eps_table2.csv");
    let (code, _, err) = epsim(&["model", "--measurements", &table, "--edges", edges.to_str().unwrap()]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("cycle"), "{err}");

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, include_str!("../data/rmi_eps_table2.csv").replacen("12.3,12.3", "12.3,-1", 1)).unwrap();
    let (code, _, err) = epsim(&["model", "--measurements", bad.to_str().unwrap()]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("row 1"), "{err}");

    let (code, _, err) = epsim(&["ingest", "--mpi", "/nonexistent.mpiprof"]);
    assert_eq!(code, EXIT_INVALID, "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(epsim(&[]).0, EXIT_USAGE);
    assert_eq!(epsim(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(epsim(&["simulate", "--nodes", "zero"]).0, EXIT_USAGE);
    assert_eq!(epsim(&["report", "-n", "3", "-N", "2"]).0, EXIT_USAGE);
    assert_eq!(epsim(&["whatif", "--energy-factor", "Forecast=-1"]).0, EXIT_USAGE);
    assert_eq!(epsim(&["ingest"]).0, EXIT_USAGE);
    let (code, _, err) = epsim(&["report", "--format", "xml"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("Usage:"), "{err}");
}

#[test]
fn ingest_bundled_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("kjp");
    let mpi = data("profiles/forecast.mpiprof");
    let io = data("profiles/forecast.ioprof");
    let single = data("profiles/pertana.ioprof");
    let (code, out, err) = epsim(&[
        "ingest", "--mpi", &mpi, "--io", &io, "--io-single", &single, "-o", out_dir.to_str().unwrap(), "--format", "csv",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.lines().any(|l| l.starts_with("Forecast,") && l.contains(",612,")), "{out}");
    assert!(out_dir.join("Forecast.kjp").exists());
    assert!(out_dir.join("PertAna.kjp").exists());
    // a parallel file read as single-mode is rejected
    let (code, _, err) = epsim(&["ingest", "--io-single", &io]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("ranks"), "{err}");
}

#[test]
fn report_exports_scatter_and_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let scatter = dir.path().join("scatter.csv");
    let breakdown = dir.path().join("breakdown.csv");
    let (code, _, _) = epsim(&[
        "report",
        "--scatter-out",
        scatter.to_str().unwrap(),
        "--breakdown-out",
        breakdown.to_str().unwrap(),
        "--exclude-contaminated",
    ]);
    assert_eq!(code, EXIT_OK);
    let s = std::fs::read_to_string(scatter).unwrap();
    assert!(s.starts_with("job,role,wallclock_s,energy_kj,power_kw"));
    assert!(s.contains("iso_5kW"));
    let b = std::fs::read_to_string(breakdown).unwrap();
    assert!(b.starts_with("scope,name,energy_kj,fraction,contaminated"));
    assert!(!b.contains("PertAna"));
}

#[test]
fn schedule_and_execute_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let kjs = dir.path().join("one.kjs");
    let scratch = dir.path().join("scratch");
    let log = dir.path().join("run.json");
    let bin = env!("CARGO_BIN_EXE_epsim");
    let st = Command::new(bin)
        .args(["schedule", "-n", "1", "-N", "1", "--io-scale", "0.5", "-o"])
        .arg(&kjs)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(String::from_utf8_lossy(&st.stdout).contains("wrote 27 jobs"));

    let run = Command::new(bin)
        .arg("execute")
        .arg(&kjs)
        .args(["--desk-scale", "100000", "--parallelism", "3", "--format", "csv", "--workdir"])
        .arg(&scratch)
        .arg("--log-out")
        .arg(&log)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 28);
    assert!(stdout.lines().skip(1).all(|l| l.contains(",succeeded,")));
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&log).unwrap()).unwrap();
    assert_eq!(log["records"].as_array().unwrap().len(), 27);
    assert_eq!(std::fs::read_dir(&scratch).unwrap().count(), 0, "scratch removed after success");

    let missing = Command::new(bin).args(["execute", "/nonexistent.kjs"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(EXIT_INVALID));
}
