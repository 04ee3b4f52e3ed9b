use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmm-bench")).args(args).output().unwrap()
}

fn write_config(dir: &Path, scenario: &str, edit: impl Fn(String) -> String) -> String {
    let out = bench(&["emit-default-config", scenario]);
    assert!(out.status.success());
    let text = edit(String::from_utf8(out.stdout).unwrap());
    let path = dir.join(format!("{scenario}.toml"));
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn set_key(text: String, key: &str, value: &str) -> String {
    text.lines()
        .map(|l| {
            if l.starts_with(&format!("{key} = ")) {
                format!("{key} = {value}")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn lists_eleven_scenarios() {
    let out = bench(&["list-scenarios"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names.len(), 11);
    assert!(names.contains(&"olmc_speedup_sweep"));
    assert!(names.contains(&"variant_variance_order"));
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = bench(&["run", "/no/such/dir/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/dir/config.toml"));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(bench(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bench(&["emit-default-config", "nope"]).status.code(), Some(2));
    assert_eq!(bench(&["--threads", "0", "list-scenarios"]).status.code(), Some(2));
}

#[test]
fn invalid_config_lists_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "olmc_speedup_sweep", |t| {
        set_key(set_key(t, "chains", "0"), "steps", "0")
    });
    let out = bench(&["run", &path]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("chains") && err.contains("steps"), "{err}");

    let path = write_config(dir.path(), "scaling_check", |t| format!("{t}\nunknown_key = 3\n"));
    assert_eq!(bench(&["run", &path]).status.code(), Some(2));
}

#[test]
fn small_sweep_is_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "olmc_speedup_sweep", |t| {
        set_key(set_key(set_key(t, "chains", "8"), "steps", "300"), "burn_in", "20")
    });
    let mut csvs = Vec::new();
    for (i, threads) in ["1", "3", "1"].iter().enumerate() {
        let out_path = dir.path().join(format!("out{i}.csv"));
        let out = bench(&["--threads", threads, "--out", out_path.to_str().unwrap(), "run", &path]);
        assert!(matches!(out.status.code(), Some(0) | Some(1)), "{out:?}");
        csvs.push(std::fs::read(&out_path).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    assert!(text.starts_with("case,metric,value,reference,stderr,n,rule,pass\n"));
    // one bias row per (alpha, method)
    assert_eq!(text.lines().filter(|l| l.contains(",variance_bias,")).count(), 12);

    let seeded = dir.path().join("seeded.csv");
    bench(&["--seed", "7", "--out", seeded.to_str().unwrap(), "run", &path]);
    assert_ne!(std::fs::read(&seeded).unwrap(), csvs[0]);
}

#[test]
fn passing_scenario_exits_zero_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "scaling_check", |t| t);
    let out = bench(&["run", &path]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 1);
    assert!(!text.contains(",fail"));
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // a handful of chains cannot resolve the bias ordering at small alpha
    let path = write_config(dir.path(), "olmc_speedup_sweep", |t| {
        let t = set_key(set_key(set_key(t, "chains", "2"), "steps", "5"), "burn_in", "0");
        set_key(t, "alphas", "[0.05, 0.04, 0.03, 0.02, 0.01]")
    });
    let out = bench(&["run", &path]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}
