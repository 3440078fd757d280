use std::process::{Command, Output};

fn covtool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covtool"))
        .args(args)
        .env_remove("COVTOOL_CELL_BUDGET")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn column(line: &str, name: &str) -> String {
    let header = "mode,transform,depth,epsilon,lhs,lhs_inner,lhs_outer,rhs,abs_gap,rel_gap,residual_volume,notes";
    let i = header.split(',').position(|h| h == name).unwrap();
    line.split(',').nth(i).unwrap().to_string()
}

#[test]
fn polar_verify_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("polar.cfg");
    std::fs::write(&path, "# unit disk\ntransform = polar\nmode = verify\ndepth = 9\n").unwrap();
    let o = covtool(&[path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "mode,transform,depth,epsilon,lhs,lhs_inner,lhs_outer,rhs,abs_gap,rel_gap,residual_volume,notes"
    );
    let lhs: f64 = column(lines[1], "lhs").parse().unwrap();
    assert!((lhs - std::f64::consts::PI).abs() < 0.05, "{lhs}");
    assert_eq!(column(lines[1], "rhs"), "3.14159265359");
}

#[test]
fn unknown_transform_exits_one_and_lists_registry() {
    let o = covtool(&["--transform", "nosuch", "--mode", "verify"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    for name in ["polar", "fold", "squash", "sinewarp"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(o.stdout.is_empty());
}

#[test]
fn flags_override_file_and_sweep_orders_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.cfg");
    std::fs::write(&path, "transform = squash\nmode = verify\ndepth = 3\n").unwrap();
    let o = covtool(&[path.to_str().unwrap(), "--mode", "zeroset", "--sweep", "4..7"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let depths: Vec<String> = rows.iter().map(|r| column(r, "depth")).collect();
    assert_eq!(depths, ["4", "5", "6", "7"]);
    let m: Vec<f64> = rows.iter().map(|r| column(r, "lhs").parse().unwrap()).collect();
    assert!(m.windows(2).all(|w| w[1] <= w[0]), "{m:?}");
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "transform = polar\nepsilon = 2\n").unwrap();
    let o = covtool(&[path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = covtool(&["/nonexistent/x.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn json_report_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = covtool(&[
        "--transform", "fold", "--domain", "-1 1", "--mode", "indicatrix", "--format", "json", "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("{\"rows\":[") && text.ends_with("]}\n"), "{text}");
    assert!(text.contains("\"rhs\":2.0"), "{text}");
}

#[test]
fn tolerance_miss_exits_two() {
    // At depth 3 the image bracket of the identity is far wider than 5%.
    let o = covtool(&["--transform", "identity", "--mode", "verify", "--depth", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stdout(&o).lines().count(), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tolerance"));
}

#[test]
fn cell_budget_env_is_enforced() {
    let o = Command::new(env!("CARGO_BIN_EXE_covtool"))
        .args(["--transform", "polar", "--mode", "zeroset", "--depth", "6"])
        .env("COVTOOL_CELL_BUDGET", "1000")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn reports_are_byte_identical_across_runs_and_thread_counts() {
    let args = ["--transform", "sinewarp:0.3", "--mode", "decompose", "--depth", "5"];
    let one = covtool(&[&args[..], &["--threads", "1"]].concat());
    let again = covtool(&[&args[..], &["--threads", "1"]].concat());
    let four = covtool(&[&args[..], &["--threads", "4"]].concat());
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(one.stdout, again.stdout);
    assert_eq!(one.stdout, four.stdout);
}

#[test]
fn every_registry_transform_runs_every_mode() {
    for t in ["identity", "linear:2,0.5,0.25,1", "rotation:0.7", "shear:0.5", "polar", "fold", "square", "squash", "sinewarp:0.3"] {
        for m in ["scale", "diff", "decompose", "sandwich", "indicatrix", "verify", "zeroset"] {
            let o = covtool(&["--transform", t, "--mode", m, "--depth", "4"]);
            let code = o.status.code();
            assert!(code == Some(0) || code == Some(2), "{t} {m}: {}", String::from_utf8_lossy(&o.stderr));
            assert_eq!(stdout(&o).lines().count(), 2, "{t} {m}");
        }
    }
}

#[test]
fn identity_verify_at_defaults() {
    let o = covtool(&["--transform", "identity", "--mode", "verify"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let row = text.lines().nth(1).unwrap();
    assert_eq!(column(row, "depth"), "8");
    assert_eq!(column(row, "lhs_outer"), "1");
    assert!(column(row, "abs_gap").parse::<f64>().unwrap() < 0.01, "{row}");
}
