use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossdiff_cli::{parse_config, Manifest, Report};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crossdiff"))
}

fn invoke(sub: &str, config: &str, dir: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let output = bin()
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--quiet")
        .args(extra)
        .output()
        .unwrap();
    (output, out)
}

fn report(out: &Path) -> Report {
    toml::from_str(&std::fs::read_to_string(out.join("report.txt")).unwrap()).unwrap()
}

const TORUS: &str = r#"
scenario = "nonlocal-torus"
[grid]
n = 32
[kernel]
width = 0.25
[time]
t_final = 0.05
dt = 1e-3
"#;

#[test]
fn torus_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = invoke("run", TORUS, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert!(r.check.iter().any(|c| c.name == "entropy" && c.passed));
    assert!(r.check.iter().any(|c| c.name == "mass" && c.passed));
    let m = Manifest::read(&out.join("manifest.txt")).unwrap();
    assert!(m.run.files.contains(&"diagnostics.csv".to_string()));
    assert!(m.run.files.contains(&"snapshots/snapshot_000000_u1.csv".to_string()));
    assert!(m.run.files.contains(&"snapshots/snapshot_000050_u2.csv".to_string()));
    // No orphans: everything on disk except the manifest is listed.
    let mut on_disk = vec![];
    for e in std::fs::read_dir(&out).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().to_string();
        if e.path().is_dir() {
            for s in std::fs::read_dir(e.path()).unwrap() {
                on_disk.push(format!("{name}/{}", s.unwrap().file_name().to_string_lossy()));
            }
        } else if name != "manifest.txt" {
            on_disk.push(name);
        }
    }
    on_disk.sort();
    let mut listed = m.run.files.clone();
    listed.sort();
    assert_eq!(on_disk, listed);
    // The echoed config parses back to the same config.
    let echo = toml::to_string(&m.config).unwrap();
    assert_eq!(parse_config(&echo, None).unwrap(), m.config);
    let header = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(header.starts_with("step,t,mass_1,mass_2,entropy,dissipation"));
}

#[test]
fn same_config_and_seed_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, oa) = invoke("run", TORUS, a.path(), &["--seed", "5"]);
    let (_, ob) = invoke("run", TORUS, b.path(), &["--seed", "5"]);
    assert_eq!(
        std::fs::read(oa.join("diagnostics.csv")).unwrap(),
        std::fs::read(ob.join("diagnostics.csv")).unwrap()
    );
    let particle = "scenario = \"particle\"\n[particle]\nsites = 6\nks = [50, 500]\nruns = 2\nt_final = 0.3\n";
    let (pa, oa) = invoke("particle", particle, a.path(), &["--seed", "9"]);
    let (_, ob) = invoke("particle", particle, b.path(), &["--seed", "9"]);
    assert_ne!(pa.status.code(), Some(3), "{}", String::from_utf8_lossy(&pa.stderr));
    for f in ["particle_errors.csv", "events.csv", "occupation.csv", "meanfield.csv"] {
        assert_eq!(std::fs::read(oa.join(f)).unwrap(), std::fs::read(ob.join(f)).unwrap(), "{f}");
    }
    let m = Manifest::read(&oa.join("manifest.txt")).unwrap();
    assert_eq!(m.run.seed, 9);
    let r = report(&oa);
    assert!(r.check.iter().any(|c| c.name == "reversibility" && c.passed));
}

#[test]
fn negative_cross_rate_is_rejected_by_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "scenario = \"nonlocal-torus\"\n[system]\nd_cross = [[0.0, -1.0], [1.0, 0.0]]\n";
    let (o, _) = invoke("run", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("system.d_cross[0][1]"), "{err}");
    let r: Report = toml::from_str(&err).unwrap();
    assert_eq!(r.status, "config-error");
}

#[test]
fn unknown_key_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = invoke("run", "scenario = \"local\"\n\n[time]\nt_fnial = 1.0\n", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4") && err.contains("t_fnial"), "{err}");
}

#[test]
fn subcommand_must_match_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = invoke("certify", "scenario = \"local\"\n", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn certify_writes_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = invoke("certify", "", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("certificate.txt")).unwrap();
    assert!(text.contains("overall: PASS"));
    assert!(out.join("certificate.csv").exists());
}

#[test]
fn certify_names_the_unbalanced_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[system]\nd = [0.1, 0.1]\nd_cross = [[0.0, 1.0], [2.0, 0.0]]\npi = [1.0, 1.0]\n";
    // Accepted at parse time.
    assert!(parse_config(cfg, Some(crossdiff_cli::Scenario::Certify)).is_ok());
    let (o, out) = invoke("certify", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&out);
    let c = r.check.iter().find(|c| c.name == "detailed-balance").unwrap();
    assert!(!c.passed && c.detail.contains("(0, 1)"), "{}", c.detail);
}

#[test]
fn power_law_certify_reports_self_diffusion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[system]\nrates = \"power-law\"\nd_matrix = [[1.0, 1.0], [1.0, 1.0]]\nalpha = 1.0\nbeta = 1.5\n[certify]\nlo = 0.1\nhi = 10.0\n";
    let (_, out) = invoke("certify", cfg, dir.path(), &[]);
    let r = report(&out);
    assert!(r.check.iter().any(|c| c.name == "self-diffusion-1" && !c.passed));
    assert!(out.join("self_diffusion.txt").exists());
}

#[test]
fn convergence_study_writes_report_and_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[grid]\nn = 32\n[time]\nt_final = 0.02\n[study]\nwidths = [0.4, 0.2, 0.1]\n";
    let (o, out) = invoke("study", cfg, dir.path(), &[]);
    assert_ne!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert!(csv.starts_with("width,L1_QT,L2_final"));
    assert_eq!(csv.lines().count(), 4);
    assert!(std::fs::read_to_string(out.join("convergence.txt")).unwrap().contains("verdict"));
}

#[test]
fn kolmogorov_general_domain_and_penalised_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = invoke("run", "scenario = \"kolmogorov\"\n[grid]\nn = 32\n[time]\nt_final = 0.1\n", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report(&out).check.iter().any(|c| c.name == "positivity" && c.passed));

    let dir = tempfile::tempdir().unwrap();
    let cfg = "scenario = \"general-domain\"\nepsilon = 0.01\n[grid]\nn = 32\n[time]\nt_final = 0.01\ndt = 1e-3\n";
    let (o, out) = invoke("run", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report(&out).check.iter().any(|c| c.name == "mass" && c.passed));

    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{TORUS}\n[penalisation]\nepsilon = 0.01\ntargets = [0.5, 1.5]\nmask = [0.4, 0.6]\n");
    let (o, out) = invoke("run", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report(&out).check.iter().any(|c| c.name == "penalisation" && c.passed));
}

#[test]
fn binary_snapshots_round_trip_as_initial_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("snapshots = \"bin\"\n{TORUS}");
    let (o, out) = invoke("run", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let u1 = out.join("snapshots/snapshot_000050_u1.bin");
    let u2 = out.join("snapshots/snapshot_000050_u2.bin");
    let next = format!(
        "{TORUS}\n[initial]\nkind = \"file\"\nfiles = [{:?}, {:?}]\n",
        u1.display().to_string(),
        u2.display().to_string()
    );
    let dir2 = tempfile::tempdir().unwrap();
    let (o, _) = invoke("run", &next, dir2.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
