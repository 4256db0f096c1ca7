// SPDX-License-Identifier: Apache-2.0

// End-to-end runs of the `vcgra` binary.

use std::path::Path;
use std::process::{Command, Output};

use vcgra::report::RunReport;

fn vcgra(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcgra"))
        .current_dir(dir)
        .env_remove("VCGRA_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vcgra(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn report(path: impl AsRef<Path>) -> RunReport {
    RunReport::from_json(&read(path)).unwrap()
}

#[test]
fn run_writes_a_full_report_and_is_repeatable() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen", "--random", "--seed", "11", "-o", "w.txt"]);
    ok(p, &["run", "--workload", "w.txt", "--out", "a"]);
    ok(p, &["run", "--workload", "w.txt", "--out", "b"]);
    let r = report(p.join("a/report.json"));
    assert_eq!(r.metrics.per_kernel.len(), 64);
    assert_eq!((r.seed, r.mode.as_str()), (11, "tiled"));
    for f in ["report.json", "kernels.csv", "trace.csv"] {
        assert_eq!(read(p.join("a").join(f)), read(p.join("b").join(f)), "{f}");
    }
    let banner = format!("config_hash={} seed=11", r.config_hash);
    assert!(read(p.join("a/trace.csv")).lines().next().unwrap().contains(&banner));
    assert!(read(p.join("a/kernels.csv")).lines().next().unwrap().contains(&banner));
    assert!(ok(p, &["report", "a/report.json"]).contains("makespan"));
}

#[test]
fn tiled_is_not_slower_than_monolithic() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen", "--random", "--seed", "2", "-o", "w.txt"]);
    ok(p, &["run", "--workload", "w.txt", "--mode", "monolithic", "--out", "m"]);
    ok(p, &["run", "--workload", "w.txt", "--mode", "tiled", "--out", "t"]);
    assert!(report(p.join("t/report.json")).metrics.makespan <= report(p.join("m/report.json")).metrics.makespan);
}

#[test]
fn threshold_flag_reaches_the_policy() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["run", "--seed", "3", "--mode", "stateless", "--stateless-threshold", "0.8", "--out", "s"]);
    assert_eq!(report(p.join("s/report.json")).mode, "stateless-0.8");
}

#[test]
fn compare_uses_the_named_baseline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let table = ok(p, &["compare", "--seed", "5", "--modes", "tiled,stateful", "--baseline", "tiled", "--out", "c"]);
    assert!(table.contains("baseline tiled"));
    let csv = read(p.join("c/comparison.csv"));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# vcgra-compare v1 config_hash="));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let tiled = rows.iter().find(|r| r[col("mode")] == "tiled").unwrap();
    assert_eq!(tiled[col("gain_tat")].parse::<f64>().unwrap(), 0.0);
    assert!(p.join("c/stateful/trace.csv").exists());
    assert!(read(p.join("c/migration_groups.csv")).lines().count() >= 3);
}

#[test]
fn one_seed_sweep_matches_compare() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["compare", "--seed", "7", "--out", "c"]);
    ok(p, &["sweep", "--seeds", "7", "--out", "s"]);
    let rows = |f: &str| read(p.join(f)).lines().skip(1).map(str::to_string).collect::<Vec<_>>();
    assert_eq!(rows("c/comparison.csv"), rows("s/metrics_by_seed.csv"));
    let corr = read(p.join("s/correlation.csv"));
    assert!(corr.contains("not-applicable"), "one point cannot correlate");

    ok(p, &["sweep", "--seeds", "0..4", "--out", "s1"]);
    ok(p, &["sweep", "--seeds", "0,1,2,3", "--out", "s2"]);
    for f in ["sweep.json", "metrics_by_seed.csv", "mode_summary.csv", "gain_by_migrations.csv", "correlation.csv"] {
        assert_eq!(read(p.join("s1").join(f)), read(p.join("s2").join(f)), "{f}");
    }
}

#[test]
fn ga_generation_and_config_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("small.toml"), "[workload]\nn_jobs = 12\n[ga]\npopulation_size = 4\ngenerations = 2\n")
        .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vcgra"))
        .current_dir(p)
        .env("VCGRA_CONFIG", "small.toml")
        .args(["gen", "--ga", "--seed", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let w = vcgra::workload_file::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(w.len(), 12);
    assert!(matches!(w.provenance, vcgra_core::Provenance::Ga { .. }));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let code = |args: &[&str]| vcgra(p, args).status.code().unwrap();
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["gen"]), 2, "generator choice is required");
    assert_eq!(code(&["gen", "--random", "--ga"]), 2);
    assert_eq!(code(&["run", "--mode", "warp"]), 2);
    assert_eq!(code(&["compare", "--seed", "1", "--modes", "tiled"]), 2);

    std::fs::write(p.join("bad.toml"), "[grid]\nheight = 0\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "run"]), 3);
    std::fs::write(p.join("unknown.toml"), "speed = 'fast'\n").unwrap();
    assert_eq!(code(&["--config", "unknown.toml", "run"]), 3);

    std::fs::write(p.join("empty.txt"), "").unwrap();
    assert_eq!(code(&["run", "--workload", "empty.txt"]), 4);
    std::fs::write(p.join("huge.txt"), "# vcgra-workload v1\n# seed = 0\n# provenance = manual\n# grid = 4x4\nkind,h,w,it_total,cycles_per_iter,bw_demand,tcdm_bytes,restartable,arrival_offset\nbig,5,5,10,1,0.1,0,true,0\n").unwrap();
    let out = vcgra(p, &["run", "--workload", "huge.txt"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(code(&["run", "--workload", "missing.txt"]), 1);
    assert_eq!(code(&["--config", "missing.toml", "run"]), 1);
}
