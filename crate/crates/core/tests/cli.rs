// SPDX-License-Identifier: Apache-2.0

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdsim::calibration::{synthesize_profile, write_profile_csv, Calibration};
use pdsim::scenario::{Mode, ScenarioConfig};
use pdsim::workload::sharegpt_like;
use pdsim::{FrequencyLadder, FrequencyMHz};

use common::scenarios_dir;

fn pdsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdsim"))
        .args(args)
        .env_remove("PDSIM_OUT")
        .env_remove("PDSIM_JOBS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, edit: impl FnOnce(&mut ScenarioConfig)) -> PathBuf {
    let mut c = ScenarioConfig::new(sharegpt_like(6.0, 4.0, 5));
    edit(&mut c);
    let path = dir.join("scenario.json");
    fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

#[test]
fn simulate_writes_reports_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios_dir().join("example_2p2d.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pdsim(&["simulate", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["report.json", "report_timeseries.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    for key in [
        "tsar",
        "isar",
        "energy",
        "ttft_percentiles",
        "itl_percentiles",
        "throughput_tps",
        "horizon_ms",
    ] {
        assert!(!report[key].is_null(), "missing {key}");
    }
    let ts = fs::read_to_string(a.join("report_timeseries.csv")).unwrap();
    assert!(ts.starts_with("time_ms,instance,phase,freq_mhz,n_req,n_kv,power_w"));
}

#[test]
fn seed_flag_changes_the_workload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = pdsim(&[
            "simulate",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("report.json")).unwrap()
    };
    assert_eq!(run("1", "a"), run("1", "b"));
    assert_ne!(run("1", "a"), run("2", "c"));
}

#[test]
fn off_ladder_static_frequency_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| {
        c.mode = Mode::Static(FrequencyMHz::new(1111).unwrap())
    });
    let o = pdsim(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mode.static"), "{}", stderr(&o));
}

#[test]
fn bad_json_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(scenarios_dir().join("example_2p2d.json")).unwrap(),
    )
    .unwrap();
    v["cluster"]["n_decode"] = serde_json::json!("two");
    fs::write(&cfg, v.to_string()).unwrap();
    let o = pdsim(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cluster.n_decode"), "{}", stderr(&o));
}

#[test]
fn uncovered_ladder_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| {
        c.ladder = FrequencyLadder::from_mhz(&[1005, 1111]).unwrap()
    });
    let o = pdsim(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("1111"), "{}", stderr(&o));
}

#[test]
fn sweep_and_compare_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| {
        c.sweep_levels = Some(FrequencyLadder::five_level())
    });
    let out = dir.path().join("o");
    let o = pdsim(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--jobs",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("energy_vs_freq.csv")).unwrap();
    assert!(csv.starts_with(pdsim::cli::SWEEP_HEADER));
    assert_eq!(csv.lines().count(), 6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("interior"));

    let o = pdsim(&["compare", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    for arm in [
        "static_1005",
        "static_1410",
        "adaptive_round_robin",
        "adaptive_state_space",
    ] {
        assert!(csv.contains(arm), "{arm}");
        assert!(out.join(format!("report_{arm}.json")).exists());
    }
}

#[test]
fn jobs_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| {
        c.sweep_levels = Some(FrequencyLadder::five_level())
    });
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(
        pdsim(&["sweep", "--config", s(&cfg), "--out", s(&a), "--jobs", "1"])
            .status
            .success()
    );
    assert!(
        pdsim(&["sweep", "--config", s(&cfg), "--out", s(&b), "--jobs", "4"])
            .status
            .success()
    );
    assert_eq!(
        fs::read(a.join("energy_vs_freq.csv")).unwrap(),
        fs::read(b.join("energy_vs_freq.csv")).unwrap()
    );
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = dir.path().join("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_pdsim"))
        .args(["simulate", "--config", s(&cfg)])
        .env("PDSIM_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("report.json").exists());
}

#[test]
fn gen_workload_refuses_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let trace = dir.path().join("trace.jsonl");
    let o = pdsim(&["gen-workload", "--config", s(&cfg), "--out", s(&trace)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(&trace).unwrap();
    assert!(!first.is_empty());
    let o = pdsim(&[
        "gen-workload",
        "--config",
        s(&cfg),
        "--out",
        s(&trace),
        "--seed",
        "9",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    assert_eq!(fs::read(&trace).unwrap(), first);
    let o = pdsim(&[
        "gen-workload",
        "--config",
        s(&cfg),
        "--out",
        s(&trace),
        "--seed",
        "9",
        "--force",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(fs::read(&trace).unwrap(), first);
    let back = pdsim::workload::load_trace(&trace).unwrap();
    assert!(!back.is_empty());
}

fn write_ladder(dir: &Path, levels: &[u32]) -> PathBuf {
    let path = dir.join("ladder.json");
    fs::write(&path, serde_json::to_string(levels).unwrap()).unwrap();
    path
}

#[test]
fn fit_round_trip_and_missing_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let truth = Calibration::default();
    let ladder = FrequencyLadder::five_level();
    let profile = dir.path().join("profile.csv");
    write_profile_csv(
        &profile,
        &synthesize_profile(&truth, &ladder, 0.0, 1).unwrap(),
    )
    .unwrap();
    let lad = write_ladder(dir.path(), &[1005, 1095, 1200, 1305, 1410]);
    let out = dir.path().join("cal.json");
    let o = pdsim(&[
        "fit",
        "--profile",
        s(&profile),
        "--ladder",
        s(&lad),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fitted = Calibration::load(&out).unwrap();
    fitted.covers(&ladder).unwrap();
    let f = FrequencyMHz::new(1200).unwrap();
    let (a, b) = (
        fitted.predict_itl(f, 300, 60_000).unwrap(),
        truth.predict_itl(f, 300, 60_000).unwrap(),
    );
    assert!((a - b).abs() < 1e-9 * b);

    let o = pdsim(&[
        "fit",
        "--profile",
        s(&profile),
        "--ladder",
        s(&lad),
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());

    let lad = write_ladder(dir.path(), &[1005, 1150, 1410]);
    let o = pdsim(&[
        "fit",
        "--profile",
        s(&profile),
        "--ladder",
        s(&lad),
        "--out",
        s(&out),
        "--force",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("1150"), "{}", stderr(&o));
}

#[test]
fn bundled_calibration_matches_default() {
    let cal = Calibration::load(&scenarios_dir().join("default_calibration.json")).unwrap();
    assert_eq!(cal, Calibration::default());
}

#[test]
fn help_mentions_subcommands() {
    let o = pdsim(&["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["simulate", "sweep", "compare", "fit", "gen-workload"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    assert_eq!(pdsim(&["simulate"]).status.code(), Some(2));
}
