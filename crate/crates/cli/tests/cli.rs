use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn gxz(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gxz"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("GXZ_WORKERS")
        .output()
        .expect("run gxz")
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SCAN: &[&str] =
    &["estimate", "crossing-scan", "--model", "z-lattice:d=2", "--family", "A", "--u", "0.5:8:6", "--L", "2,4,8", "--trials", "40", "--seed", "7"];

#[test]
fn crossing_scan_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = gxz(dir.path(), SCAN);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 3);
    // Frozen from the first run of this job.
    let successes: Vec<u64> = csv.lines().skip(1).map(|r| r.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(successes, [27, 0, 0, 0, 0, 0, 37, 0, 0, 0, 0, 0, 39, 0, 0, 0, 0, 0]);
    let m = manifest(dir.path());
    assert_eq!(m["status"], "ok");
    assert_eq!(m["command"], "estimate crossing-scan");
    assert_eq!(m["config"]["seed"], 7);
    let outputs = m["outputs"].as_array().unwrap();
    let names: Vec<&str> = outputs.iter().map(|a| a["file"].as_str().unwrap()).collect();
    for f in ["scan.csv", "proxy.json", "scan.svg"] {
        assert!(names.contains(&f), "{f} missing from {names:?}");
    }
    for a in outputs {
        let bytes = std::fs::read(dir.path().join(a["file"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"], hex::encode(Sha256::digest(&bytes)));
    }
}

#[test]
fn same_seed_same_bytes_across_worker_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args: Vec<&str> = SCAN.iter().copied().chain(["--workers", "1"]).collect();
    assert_eq!(gxz(a.path(), &args).status.code(), Some(0));
    let args: Vec<&str> = SCAN.iter().copied().chain(["--workers", "3"]).collect();
    assert_eq!(gxz(b.path(), &args).status.code(), Some(0));
    let read = |d: &Path| std::fs::read(d.join("scan.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn negative_u_max_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gxz(dir.path(), &["interlace", "sample", "--model", "z-lattice:d=2", "--u-max", "-1", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let m = manifest(dir.path());
    assert_eq!(m["status"], "error");
    assert!(m["error"].as_str().unwrap().contains("u-max"));
}

#[test]
fn clipped_ball_is_a_geometry_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = gxz(dir.path(), &["potential", "capacity", "--model", "z-lattice:d=2,r=32xz:32", "--set", "ball:r=100"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("clipped"), "{}", stderr(&o));
    assert_eq!(manifest(dir.path())["status"], "error");
}

#[test]
fn config_file_is_strict_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "model = \"z-lattice:d=2\"\nsedd = 4\n").unwrap();
    let o = gxz(&dir.path().join("o1"), &["graph", "info", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sedd"), "{}", stderr(&o));

    let good = dir.path().join("job.json");
    std::fs::write(&good, r#"{"model": "z-lattice:d=2,r=4xz:4", "seed": 4}"#).unwrap();
    let out = dir.path().join("o2");
    let o = gxz(&out, &["graph", "info", "--config", good.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["config"]["model"], "z-lattice:d=2,r=4xz:4");
    let info: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("graph.json")).unwrap()).unwrap();
    assert_eq!(info["base_vertices"], 81);
}

#[test]
fn beta_outside_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = gxz(dir.path(), &["graph", "info", "--model", "gasket:level=3xz:4", "--beta", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_and_missing_seed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gxz(dir.path(), &["graph", "info", "--model", "point", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(gxz(dir.path(), &["bogus"]).status.code(), Some(2));
    let o = gxz(dir.path(), &["perco", "crossing", "--model", "z-lattice:d=2", "--family", "A", "--u", "1", "--L", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn small_jobs_across_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, args: &[&str], file: &str| {
        let out = dir.path().join(name);
        let o = gxz(&out, args);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        assert!(out.join(file).exists(), "{name}: no {file}");
        let m = manifest(&out);
        assert!(m["outputs"].as_array().unwrap().iter().any(|a| a["file"] == file), "{name}");
    };
    run("build", &["graph", "build", "--model", "gasket:level=3xz:4"], "graph.bin");
    run("cap", &["potential", "capacity", "--model", "z-lattice:d=2", "--radii", "4,8"], "capacity.json");
    run("eq", &["potential", "equilibrium", "--model", "z-lattice:d=2", "--set", "ball:r=1", "--radii", "6"], "equilibrium.csv");
    run("sample", &["interlace", "sample", "--model", "z-lattice:d=2", "--u-max", "0.5", "--seed", "3"], "trajectories.jsonl");
    run("avoid", &["interlace", "avoidance", "--model", "z-lattice:d=2", "--u", "0.1,0.5", "--trials", "200", "--seed", "3"], "avoidance.csv");
    run("cross", &["perco", "crossing", "--model", "z-lattice:d=2", "--family", "B", "--u", "0.5,1", "--L", "2", "--trials", "50", "--seed", "2"], "crossing.csv");
    run("cover", &["renorm", "cover", "--model", "z-lattice:d=2", "--family", "S", "--ell", "4", "--L", "1"], "net.csv");
    run("sched", &["renorm", "schedule", "--model", "z-lattice:d=2", "--u", "0.5", "--ell0", "100", "--L0", "2"], "schedule.json");
    run("fit", &["estimate", "stretch-fit", "--L", "2,4,8,16", "--p", "0.5,0.3,0.1,0.01"], "fit.json");
    run("exc", &["diagnose", "excursions", "--model", "z-lattice:d=2", "--u-max", "0.5", "--radii", "1,4", "--seed", "5"], "excursions.json");
}
