use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spatfactor"));
    c.env("SPATFACTOR_THREADS", "1");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn data_rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().filter(|l| !l.starts_with('#')).skip(1).map(String::from).collect()
}

/// Simulated two-group data plus a short fit in a fresh directory.
fn fitted(sigma2: f64, burnin: usize, post: usize, thin: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("sim.txt"), format!("sim.side = 4\nsim.T = 8\nsim.sigma2 = {sigma2}\nsim.seed = 3\n")).unwrap();
    ok(&["simulate", "--config", "sim.txt", "--out", "sim"], d);
    std::fs::write(
        d.join("fit.txt"),
        format!("data.path = sim/data.csv\nmodel.L = 5\nschedule.burnin = {burnin}\nschedule.post_burnin = {post}\nschedule.thin = {thin}\n"),
    )
    .unwrap();
    ok(&["fit", "--config", "fit.txt", "--out", "fit"], d);
    dir
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                stack.push(e);
            } else {
                out.push(e.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn store_rows_follow_schedule() {
    let dir = fitted(0.1, 20, 10, 2);
    let c0 = dir.path().join("fit/chain0");
    for name in ["psi", "rho", "deviance", "eta", "sigma2", "loadings", "factor0_labels", "factor1_alpha"] {
        assert_eq!(data_rows(&c0.join(format!("{name}.csv"))).len(), 5, "{name}");
    }
    assert_eq!(data_rows(&c0.join("ltrace.csv")).len(), 30);
}

#[test]
fn outputs_are_reproducible() {
    let a = fitted(0.1, 10, 6, 1);
    let b = fitted(0.1, 10, 6, 1);
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    for f in &fa {
        if f.file_name().unwrap() == "timings.txt" {
            continue;
        }
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{} differs", f.display());
    }
}

#[test]
fn malformed_row_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("data.csv"), "location_id,x,y,type,time,value\n1,0,0,1,1,0.5\n2,1,0,1,1,abc\n").unwrap();
    std::fs::write(d.join("fit.txt"), "data.path = data.csv\n").unwrap();
    let out = run(&["fit", "--config", "fit.txt", "--out", "fit"], d);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn unknown_key_and_bad_usage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fit.txt"), "data.path = data.csv\nmodel.colour = red\n").unwrap();
    let out = run(&["fit", "--config", "fit.txt", "--out", "fit"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.colour"));
    assert_eq!(run(&["frobnicate"], d).status.code(), Some(2));
    assert_eq!(run(&["fit", "--out", "x"], d).status.code(), Some(2));
}

#[test]
fn cluster_writes_one_label_per_location() {
    let dir = fitted(0.1, 20, 10, 1);
    let d = dir.path();
    ok(&["cluster", "--fit", "fit", "--out", "cl", "--K", "2", "--truth", "sim/groups.csv"], d);
    let rows = data_rows(&d.join("cl/labels.csv"));
    assert_eq!(rows.len(), 16);
    for r in &rows {
        let c: usize = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!(c == 1 || c == 2);
    }
    let rep = std::fs::read_to_string(d.join("cl/report.txt")).unwrap();
    assert!(rep.contains("rand_index = "));
    assert!(rep.contains("iterations = 0,1,2,3,4,5,6,7,8,9"));
}

#[test]
fn predict_space_and_time() {
    let dir = fitted(0.1, 10, 4, 1);
    let d = dir.path();
    std::fs::write(d.join("new.csv"), "location_id,x,y\na,0,0\nb,1.5,2.5\n").unwrap();
    ok(&["predict-space", "--fit", "fit", "--out", "ps", "--locations", "new.csv"], d);
    assert_eq!(data_rows(&d.join("ps/draws.csv")).len(), 4 * 2 * 8);
    assert_eq!(data_rows(&d.join("ps/summary.csv")).len(), 2 * 8);
    ok(&["predict-time", "--fit", "fit", "--out", "pt", "--horizon", "3"], d);
    let rows = data_rows(&d.join("pt/summary.csv"));
    assert_eq!(rows.len(), 16 * 3);
    assert!(rows[0].starts_with("1,1,9,"), "{}", rows[0]);
}

#[test]
fn diagnose_recovers_noise_scale() {
    let dir = fitted(0.01, 150, 50, 1);
    let d = dir.path();
    ok(&["diagnose", "--fit", "fit", "--out", "dg"], d);
    let text = std::fs::read_to_string(d.join("dg/metrics.txt")).unwrap();
    let get = |k: &str| -> f64 {
        text.lines().find_map(|l| l.strip_prefix(&format!("chain0.{k} = "))).unwrap_or_else(|| panic!("{k} missing")).parse().unwrap()
    };
    let mse = get("postMeanMSE");
    assert!(mse.is_finite() && mse < 0.1, "postMeanMSE {mse}");
    assert!(get("waic").is_finite() && get("dic").is_finite());
    assert_eq!(data_rows(&d.join("dg/deviance.csv")).len(), 50);
}
