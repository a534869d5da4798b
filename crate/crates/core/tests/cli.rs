use std::fs;
use std::path::Path;
use std::process::Command;

fn trapscope(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_trapscope"))
        .args(args)
        .env_remove("TRAPSCOPE_THREADS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn sweep(dir: &Path, cfg: &str, threads: &str) -> std::process::Output {
    trapscope(&[
        "sweep",
        "--op",
        "trap",
        "--param",
        "aperture_width",
        "--start",
        "20",
        "--end",
        "200",
        "--step",
        "10",
        "--config",
        cfg,
        "--out",
        dir.to_str().unwrap(),
        "--threads",
        threads,
    ])
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[trap]\naperture_width = -5.0\n");
    let out = trapscope(&[
        "trap-solve",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aperture_width"));

    let cfg = write_config(dir.path(), "[trap]\nmystery = 1\n");
    let out = trapscope(&[
        "trap-solve",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = trapscope(&[
        "trap-solve",
        "--config",
        "/nonexistent/run.toml",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert_eq!(trapscope(&["warp-drive"]).status.code(), Some(2));
    let out = trapscope(&[
        "sweep",
        "--op",
        "teleport",
        "--param",
        "aperture_width",
        "--start",
        "0",
        "--end",
        "1",
        "--step",
        "1",
        "--out",
        o,
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = trapscope(&[
        "sweep",
        "--op",
        "trap",
        "--param",
        "aperture_width",
        "--start",
        "200",
        "--end",
        "20",
        "--step",
        "10",
        "--out",
        o,
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = trapscope(&[
        "sweep",
        "--op",
        "trap",
        "--param",
        "rf_voltage",
        "--start",
        "1",
        "--end",
        "2",
        "--step",
        "1",
        "--out",
        o,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(
        trapscope(&["trap-solve", "--threads", "0", "--out", o])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn sweep_rows_header_and_thread_independence() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), "");
    assert_eq!(sweep(a.path(), &cfg, "1").status.code(), Some(0));
    assert_eq!(sweep(b.path(), &cfg, "8").status.code(), Some(0));
    let name = "sweep_trap_aperture_width.csv";
    let x = fs::read(a.path().join(name)).unwrap();
    let y = fs::read(b.path().join(name)).unwrap();
    assert_eq!(x, y);
    let text = String::from_utf8(x).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("value_um,height_um,omega_x_MHz,omega_y_MHz,omega_y_norm")
    );
    assert_eq!(lines.count(), 19);
}

#[test]
fn manifest_lists_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = trapscope(&[
        "collection",
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    let listed: Vec<String> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap().to_owned())
        .collect();
    assert!(listed.iter().any(|p| p == "effective_config.toml"));
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name != "manifest.json" {
            assert!(listed.contains(&name), "{name} missing from manifest");
        }
    }
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_trapscope"))
        .args(["trap-solve", "--out", dir.path().to_str().unwrap()])
        .env("TRAPSCOPE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[budget]\ntotal_transmittance = 0.3\n\n[sweep]\nrays_per_point = 100000\n",
    );
    let o = dir.path().to_str().unwrap();
    let out = trapscope(&["reproduce", "budget", "--config", &cfg, "--out", o]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = [out.stdout, out.stderr].concat();
    assert!(String::from_utf8_lossy(&text).contains("FAIL predicted_detection_pct"));
}
