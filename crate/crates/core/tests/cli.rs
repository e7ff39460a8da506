use std::process::Command;

fn bench(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_diht-bench"))
        .args(args)
        .output()
        .expect("run diht-bench")
}

#[test]
fn csv_output_has_the_documented_columns() {
    let out = bench(&["--locales", "2", "--tasks", "2", "--ops", "5000", "--key-bits", "10", "--mode", "ops-async", "--output", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "mode,locales,tasks,ops,elapsed_s,ops_per_s,remote_dispatches,local_ops");
    let row: Vec<_> = lines[1].split(',').collect();
    assert_eq!(&row[..4], &["ops-async", "2", "2", "5000"]);
}

#[test]
fn json_output_parses() {
    let out = bench(&["--locales", "1", "--tasks", "2", "--key-bits", "10", "--mode", "iter-serial", "--output", "json"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["mode"], "iter-serial");
    assert_eq!(rows[0]["ops"], 1024);
}

#[test]
fn invalid_configuration_exits_nonzero() {
    for args in [
        &["--read-ratio", "1.5"][..],
        &["--buffer-size", "0"],
        &["--locales", "0"],
        &["--mode", "fast"],
        &["--output", "xml"],
    ] {
        let out = bench(args);
        assert!(!out.status.success(), "{args:?} was accepted");
        assert!(!out.stderr.is_empty());
    }
}
