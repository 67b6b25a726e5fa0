use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
problem = "lqr5x3"

[scheme]
h = 0.005
viscosity = 1.0
iterations = 2

[network]
sensors = 16
latent = 6
branch_hidden = [8]
trunk_hidden = [8, 8]
shift_equivariant = true

[training]
epochs = 8
interior_points = 48
terminal_points = 24
probe_points = 100

[terminal]
family = ["0.3 + 0.1*|x|^2", "0.3 + 0.2*|x|^2"]
"#;

fn hjb(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjb"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env("HJB_OUTPUT_ROOT", cwd.join("root"))
        .output()
        .expect("binary runs")
}

fn trained(dir: &Path, name: &str) {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let out = hjb(&["train", "--config", "tiny.toml", "--out", name], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn train_is_reproducible_and_write_once() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path(), "a");
    trained(tmp.path(), "b");
    assert_eq!(read_dir_sorted(&tmp.path().join("a")), read_dir_sorted(&tmp.path().join("b")));
    let again = hjb(&["train", "--config", "tiny.toml", "--out", "a"], tmp.path());
    assert_eq!(again.status.code(), Some(2));
    for f in ["manifest.json", "eps.csv", "training_0.csv", "training_1.csv", "iterate_1.json", "config.toml"] {
        assert!(tmp.path().join("a").join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(tmp.path().join("a/training_0.csv")).unwrap();
    assert!(csv.starts_with("epoch,L1,L2,eps1_hat,eps2_hat,wall_ms\n"));
    assert!(csv.lines().last().unwrap().starts_with("# config_hash="));
}

#[test]
fn default_run_directory_lives_under_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let out = hjb(&["train", "--config", "tiny.toml", "--iterations", "1"], tmp.path());
    assert!(out.status.success());
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(Path::new(printed.trim()).starts_with(tmp.path().join("root")));
}

#[test]
fn invalid_h_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), TINY.replace("h = 0.005", "h = 1.5")).unwrap();
    let out = hjb(&["train", "--config", "bad.toml", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    let rec: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(rec["path"], "scheme.h");
    assert_eq!(rec["error"], "Config");
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn infer_matches_training_field_and_handles_empty_points() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path(), "run");
    let d = tmp.path();
    fs::write(d.join("pts.csv"), "t,x1,x2,x3,x4,x5\n0,0.1,0.2,0.3,0,0\n0.25,-0.5,0,0,0.5,0\n").unwrap();
    let out = hjb(&["infer", "--run", "run", "--g", "0.3 + 0.1*|x|^2", "--points", "pts.csv"], d);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,x1,x2,x3,x4,x5,V");
    assert_eq!(lines.len(), 4);

    // same value through the library
    let net = hjb_core::deeponet::OperatorNetwork::load(&d.join("run/iterate_1.json")).unwrap();
    let g = hjb_core::ocp::TerminalCondition::new(
        hjb_core::ocp::TerminalFn::quadratic(0.3, 0.1),
        net.sensors().clone(),
    )
    .unwrap();
    let v = hjb_core::deeponet::operator_eval(&net, &g, 0.0, &[0.1, 0.2, 0.3, 0.0, 0.0]).unwrap();
    let printed: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!((printed - v).abs() <= 1e-12 * (1.0 + v.abs()));

    fs::write(d.join("empty.csv"), "").unwrap();
    let out = hjb(&["infer", "--run", "run", "--g", "0.57*|x|^2", "--points", "empty.csv"], d);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("t,x1,x2,x3,x4,x5,V"));
    assert_eq!(text.lines().count(), 2);

    let out = hjb(&["infer", "--run", "run", "--g", "sin(x)", "--points", "pts.csv"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infer_accepts_sensor_value_files() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path(), "run");
    let d = tmp.path();
    fs::write(d.join("pts.csv"), "t,x1,x2,x3,x4,x5\n0,0.1,0.2,0.3,0,0\n").unwrap();
    fs::write(d.join("g.txt"), vec!["0.5"; 16].join("\n")).unwrap();
    let out = hjb(&["infer", "--run", "run", "--g", "g.txt", "--points", "pts.csv"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(d.join("short.txt"), "0.5, 0.5").unwrap();
    let out = hjb(&["infer", "--run", "run", "--g", "short.txt", "--points", "pts.csv"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_reports_and_rejects_inapplicable_oracles() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path(), "run");
    let d = tmp.path();
    let out = hjb(&["compare", "--run", "run", "--oracle", "hopflax", "--g", "|x|"], d);
    assert_eq!(out.status.code(), Some(4));
    let out = hjb(&["compare", "--run", "run", "--oracle", "grid", "--g", "|x|"], d);
    assert_eq!(out.status.code(), Some(4));
    let out = hjb(
        &["compare", "--run", "run", "--oracle", "transcription", "--g", "0.57*|x|^2", "--probes", "2", "--steps", "10", "--out", "c.csv"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(d.join("c.csv")).unwrap();
    assert!(text.starts_with("probe,t,x1,x2,x3,x4,x5,v_hat,v_oracle,abs_err\n"));
    assert!(text.lines().any(|l| l.starts_with("max,")));
    assert!(text.lines().any(|l| l.starts_with("mean,")));
}

#[test]
fn synthesize_writes_series_and_flags_escapes() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path(), "run");
    let d = tmp.path();
    let out = hjb(&["synthesize", "--run", "run", "--g", "0.45*|x|^2", "--x0", "0.5,-0.5,0.5,0.5,0.5", "--out", "s"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.csv", "x1.svg", "x5.svg", "u1.svg", "u3.svg"] {
        assert!(d.join("s").join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(d.join("s/trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 101 + 1);
    assert!(!csv.contains("TrajectoryEscapedDomain"));

    let out = hjb(&["synthesize", "--run", "run", "--g", "0.45*|x|^2", "--x0", "3,3,3,3,3", "--out", "far"], d);
    assert!(out.status.success());
    assert!(fs::read_to_string(d.join("far/trajectory.csv")).unwrap().contains("# warning=TrajectoryEscapedDomain"));
}

#[test]
fn grid_solve_and_oracles() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = hjb(&["grid-solve", "--problem", "vehicle2d", "--h", "0.2", "--iterations", "2", "--out", "g"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("g/field_1.slab").is_file());
    let csv = fs::read_to_string(d.join("g/value_t0.csv")).unwrap();
    assert!(csv.starts_with("x1,x2,V0,V1\n"));
    assert_eq!(csv.lines().count(), 1 + 21 * 21 + 1);
    let out = hjb(&["grid-solve", "--problem", "lqr5x3", "--out", "g5"], d);
    assert_eq!(out.status.code(), Some(4));

    let out = hjb(&["oracle", "--problem", "vehicle2d", "--kind", "hopflax", "--x0", "-1.5,-0.5"], d);
    let rec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((rec["value"].as_f64().unwrap() - (2.5f64.sqrt() - 1.0)).abs() < 1e-15);
    let out = hjb(&["oracle", "--problem", "vehicle2d", "--kind", "transcription", "--x0", "-1.5,-0.5", "--out", "tr.csv"], d);
    let rec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((rec["value"].as_f64().unwrap() - (2.5f64.sqrt() - 1.0)).abs() < 5e-3);
    assert!(d.join("tr.csv").is_file());
}

#[test]
fn catalog_lists_all_problems() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hjb(&["catalog"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    for id in ["vehicle2d", "lqr5x3", "lqr10x5"] {
        assert!(text.contains(id));
    }
    assert!(text.contains("0.3 + 0.3*|x|^2"));
}
