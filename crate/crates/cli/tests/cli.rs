use std::process::Command;

fn whdg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_whdg"))
}

#[test]
fn converge_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv.csv");
    let status = whdg()
        .args([
            "converge",
            "--degree",
            "0,1",
            "--levels",
            "2",
            "--beta=2,-1",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("method,degree,level,cells,h,dofs,metric,error,rate")
    );
    assert!(csv.lines().any(|l| l.starts_with("whdg,1,2,64,")));
    assert!(csv.lines().all(|l| !l.starts_with("method,")) || csv.matches("method,").count() == 1);
}

#[test]
fn pin_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pin.json");
    let out = dir.path().join("pin.csv");
    let json = whdg().arg("default-config").output().unwrap();
    assert!(json.status.success());
    std::fs::write(&cfg, &json.stdout).unwrap();
    let status = whdg()
        .args(["pin", "--levels", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 4);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pin.json");
    std::fs::write(&cfg, "{\"length\": -1}").unwrap();
    let out = whdg()
        .args(["pin", "--levels", "1", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn diagnostics_print_small_differences() {
    let out = whdg()
        .args(["sg-compare", "--cells", "8", "--beta", "5"])
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let v: f64 = text.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(v <= 1e-6);
    let out = whdg().arg("quad-check").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let v: f64 = text.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(v <= 1e-8);
}
