use std::path::Path;
use std::process::Command;

use sdaf_cli::{FieldArchive, RunReport};

const SOLVE: &str = "seed = 1\n[domain]\nn = 10\n[action]\nalpha = 1.5\nk = 4\nmu = 4.0\n";

fn sdaf(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sdaf")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn report(dir: &Path) -> RunReport {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn solve_writes_archive_and_m_theta() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "c.toml", SOLVE);
    let out = t.path().join("o");
    let (code, stdout, _) = sdaf(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    let r = report(&out);
    let m = r.result["m_theta"].as_f64().unwrap();
    assert!((m - 0.5 * 3f64.powf(1.5)).abs() < 1e-8, "{m}");
    assert_eq!(r.seed, 1);
    assert_eq!(r.config.action.alpha, 1.5);
    let a = FieldArchive::load(&out.join("fields.sdaf")).unwrap();
    assert_eq!(a.phi.values.len(), 200);
    assert!(std::fs::read_to_string(out.join("config.toml")).unwrap().contains("alpha = 1.5"));
    assert!(out.join("concentration.schema.json").exists());
}

#[test]
fn negative_quartic_fails_the_growth_check() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "c.toml", SOLVE);
    let out = t.path().join("o");
    let (code, stdout, _) = sdaf(&[
        "growthcheck",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--override",
        "action.perturbation={kind=\"power\",coefficient=-1.0,exponent=4.0}",
    ]);
    assert_eq!(code, 2);
    assert!(stdout.contains("F4"));
    let r = report(&out);
    let f4 = r.checks.iter().find(|c| c.name == "F4").unwrap();
    assert_eq!(f4.verdict, sdaf_core::Verdict::Fail);
}

#[test]
fn missing_key_exits_with_one() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "c.toml", "[domain]\nn = 8\n[action]\nk = 4\n");
    let (code, _, stderr) = sdaf(&["solve", "--config", &cfg, "--out", t.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("alpha"), "{stderr}");
    let (code, _, stderr) = sdaf(&[
        "saddle",
        "--config",
        &write(t.path(), "d.toml", SOLVE),
        "--override",
        "action.alpha=3.0",
        "--out",
        t.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("action.alpha"), "{stderr}");
}

#[test]
fn archive_from_another_grid_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "c.toml", SOLVE);
    let out = t.path().join("o");
    assert_eq!(sdaf(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
    let archive = out.join("fields.sdaf");
    let next = format!(
        "[domain]\nn = 12\n[action]\nalpha = 1.5\nk = 4\nmu = 4.0\n[initial]\nkind = \"archive\"\npath = {:?}\n",
        archive.to_str().unwrap()
    );
    let cfg = write(t.path(), "d.toml", &next);
    let (code, _, stderr) = sdaf(&["spectrum", "--config", &cfg, "--out", t.path().join("p").to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("n = 10") && stderr.contains("n = 12"), "{stderr}");
}

#[test]
fn spectrum_and_flow_tables() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "c.toml", &format!("{SOLVE}[flow]\nhorizon = 0.2\n"));
    let out = t.path().join("s");
    assert_eq!(sdaf(&["spectrum", "--config", &cfg, "--out", out.to_str().unwrap()]).0, 0);
    let mut rd = csv::Reader::from_path(out.join("spectrum.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["index", "eigenvalue", "residual"]);
    let vals: Vec<f64> = rd.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[0].abs() <= w[1].abs() + 1e-12));
    let out = t.path().join("f");
    let (code, stdout, _) = sdaf(&["flow", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    let mut rd = csv::Reader::from_path(out.join("flow.csv")).unwrap();
    let h = rd.headers().unwrap().clone();
    assert_eq!(&h[0], "t");
    assert_eq!(&h[1], "action");
    let actions: Vec<f64> = rd.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert!(actions.len() > 1);
    let schema: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("flow.schema.json")).unwrap()).unwrap();
    assert_eq!(schema["format"], "sdaf-1");
}

#[test]
fn seed_flag_overrides_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "c.toml", SOLVE);
    let out = t.path().join("o");
    assert_eq!(sdaf(&["convexity", "--config", &cfg, "--seed", "42", "--out", out.to_str().unwrap()]).0, 0);
    let r = report(&out);
    assert_eq!(r.seed, 42);
    assert!(std::fs::read_to_string(out.join("summary.txt")).unwrap().contains("seed        42"));
}
