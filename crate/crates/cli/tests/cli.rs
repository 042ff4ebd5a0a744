use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use ofu_core::analyze::{divergence_report, load_jobs_csv, DivergenceReport, DEFAULT_OUTLIER_THRESHOLD_PCT};
use ofu_core::archdb::Precision;
use ofu_core::simulate::{sampling_error_study, ClockModel, SimConfig, DEFAULT_SEED};
use ofu_core::tilemodel::overhead_sweep;

fn ofu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofu"))
        .args(args)
        .env_remove("OFU_ARCH_DB")
        .output()
        .expect("spawn ofu")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn scratch(name: &str, contents: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-tests");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    fs::write(&path, contents).unwrap();
    path
}

fn fixture(name: &str) -> String {
    format!("{}/../core/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn peak_prints_rounded_h100_table() {
    let text = stdout(&ofu(&["peak", "--arch", "H100-SXM"]));
    let row = |p: &str| {
        text.lines()
            .find(|l| l.split_whitespace().next() == Some(p))
            .unwrap_or_else(|| panic!("no {p} row in\n{text}"))
            .split_whitespace()
            .nth(1)
            .unwrap()
            .to_string()
    };
    assert_eq!(row("FP16"), "989.4");
    assert_eq!(row("FP8"), "1978.0");
    assert_eq!(row("TF32"), "494.5");
}

#[test]
fn peak_json_keeps_full_precision() {
    let v: serde_json::Value = serde_json::from_str(&stdout(&ofu(&["peak", "--format", "json"]))).unwrap();
    let fp16 = v.as_array().unwrap().iter().find(|e| e["precision"] == "FP16").unwrap();
    assert_eq!(fp16["tflops"].as_f64().unwrap(), 132.0 * 4096.0 * 1830.0 * 1e6 / 1e12);
}

#[test]
fn ofu_single_sample_trace() {
    let trace = scratch("one.csv", "timestamp,gpu_id,tensor_active,sm_clock_mhz\n0,gpu0,0.55,1352\n");
    let t = trace.to_str().unwrap();
    let table = stdout(&ofu(&["ofu", "--trace", t, "--arch", "H100-SXM", "--precision", "FP16"]));
    // 0.55 × 1352 / 1830 = 0.406339...
    assert!(table.contains("40.63%"), "{table}");

    let json = stdout(&ofu(&["ofu", "--trace", t, "--precision", "FP16", "--format", "json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v[0]["mean_ofu"].as_f64().unwrap(), 0.55 * 1352.0 / 1830.0);
    assert_eq!(v[0]["sample_count"], 1);
}

#[test]
fn simulate_then_ofu_is_exact_without_noise() {
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("zero-noise.csv");
    let p = path.to_str().unwrap();
    stdout(&ofu(&[
        "simulate", "--tpa", "0.55", "--duration", "600", "--gpus", "4", "--clock-std", "0", "--seed", "7", "-o", p,
    ]));
    let json = stdout(&ofu(&["ofu", "--trace", p, "--format", "json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v[0]["mean_ofu"].as_f64().unwrap(), 0.55 * 1352.0 / 1830.0);
    assert_eq!(v[0]["sample_count"], 2400);
    assert_eq!(v[0]["gpu_count"], 4);
}

#[test]
fn simulate_is_reproducible_per_seed() {
    let run = |seed: &str| stdout(&ofu(&["simulate", "--duration", "30", "--seed", seed]));
    assert_eq!(run("11"), run("11"));
    assert_ne!(run("11"), run("12"));
}

#[test]
fn ofu_with_job_windows() {
    let trace = scratch(
        "two-gpus.csv",
        "timestamp,gpu_id,tensor_active,sm_clock_mhz\n\
         0,gpu0,0.5,1830\n0,gpu1,0.25,1830\n10,gpu0,0.5,1830\n10,gpu1,0.25,1830\n20,gpu0,1.0,1830\n",
    );
    let windows = scratch("windows.csv", "job_id,start,end,gpu_ids\njob-a,0,20,gpu0\njob-b,0,30,gpu0;gpu1\n");
    let csv = stdout(&ofu(&[
        "ofu", "--trace", trace.to_str().unwrap(), "--window", windows.to_str().unwrap(), "--format", "csv",
    ]));
    let rows: BTreeMap<&str, Vec<&str>> = csv.lines().skip(1).map(|l| {
        let f: Vec<&str> = l.split(',').collect();
        (f[0], f)
    }).collect();
    assert_eq!(rows["job-a"][2], "2");
    assert_eq!(rows["job-a"][3].parse::<f64>().unwrap(), 0.5);
    assert_eq!(rows["job-b"][1], "2");
    assert_eq!(rows["job-b"][3].parse::<f64>().unwrap(), 0.5);
}

#[test]
fn ofu_prometheus_fixture_and_strict_mode() {
    let f = fixture("dcgm_mixed.prom");
    let out = ofu(&["ofu", "--trace", &f, "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v[0]["sample_count"], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning:"));

    let strict = ofu(&["ofu", "--trace", &f, "--strict"]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("strict mode"));
}

#[test]
fn parse_kernel_decodes_nvjet_example() {
    let json = stdout(&ofu(&["parse-kernel", "nvjet_sm90_hsh_256x160_64x4_2x1", "--format", "json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["family"], "NvJet");
    assert_eq!(v["arch_tag"], "sm90");
    assert_eq!(v["precision_tag"], "hsh");
    assert_eq!(v["stages"], 4);
    let t = &v["tiles"];
    assert_eq!((t["t_m"].as_u64(), t["t_n"].as_u64(), t["t_k"].as_u64()), (Some(256), Some(160), Some(64)));
    assert_eq!((t["c_m"].as_u64(), t["c_n"].as_u64()), (Some(2), Some(1)));

    let other = stdout(&ofu(&["parse-kernel", "sm90_xmma_gemm_bf16bf16_bf16f32"]));
    assert!(other.contains("Xmma"), "{other}");
}

#[test]
fn adjust_identity_and_kernel_geometry() {
    let exact = (2u128 * 4096 * 4096 * 4096).to_string();
    let json = stdout(&ofu(&[
        "adjust", "--ofu", "0.42", "--m", "4096", "--k", "4096", "--n", "4096", "--executed", &exact, "--format", "json",
    ]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["adjusted_ofu"].as_f64().unwrap(), 0.42);
    assert_eq!(v["overhead_pct"].as_f64().unwrap(), 0.0);

    let json = stdout(&ofu(&[
        "adjust", "--ofu", "0.42", "--m", "4096", "--k", "4096", "--n", "160",
        "--kernel", "nvjet_sm90_hsh_256x160_64x4_2x1", "--format", "json",
    ]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["overhead_pct"].as_f64().unwrap(), 0.0);
    assert_eq!(v["source"], "kernel_name");

    let bad = ofu(&["adjust", "--ofu", "0.4", "--m", "8", "--k", "8", "--n", "8", "--kernel", "cutlass_foo"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn sweep_csv_matches_library() {
    let csv = stdout(&ofu(&["sweep", "--min", "128", "--max", "8192", "--step", "96", "--precision", "FP16,FP8"]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,precision,overhead_pct"));
    let sizes: Vec<u64> = (128..=8192).step_by(96).collect();
    let expected = overhead_sweep(&sizes, &[Precision::FP16, Precision::FP8]);
    let got: Vec<(u64, String, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].to_string(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert_eq!((g.0, g.1.as_str(), g.2), (e.n, e.precision.label(), e.overhead_pct));
    }
}

#[test]
fn study_csv_matches_library() {
    let csv = stdout(&ofu(&["study", "--duration", "300", "--replicates", "8", "--intervals", "5,10"]));
    let cfg = SimConfig::steady(0.55, 300.0, ClockModel::H100_GEMM, DEFAULT_SEED);
    let expected = sampling_error_study(&cfg, &[5.0, 10.0], 1830.0, 8).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for (row, e) in rows.iter().zip(&expected) {
        assert_eq!(row, &vec![e.interval_s, e.sigma_pp, e.ci95_pp]);
    }
}

const JOBS: &str = "job_id,gpu_count,app_mfu_pct,ofu_pct,user\n\
    a,8,40.1,41.3,u1\nb,64,30.7,35.2,u2\nc,8,20.05,29.9,u1\nd,512,45.5,44.125,u3\ne,64,12.3,12.0,u2\n";

#[test]
fn analyze_json_round_trips() {
    let jobs = scratch("jobs.csv", JOBS);
    let json = stdout(&ofu(&["analyze", "--jobs", jobs.to_str().unwrap(), "--format", "json"]));
    let parsed: DivergenceReport = serde_json::from_str(&json).unwrap();
    let expected = divergence_report(&load_jobs_csv(JOBS.as_bytes()).unwrap(), DEFAULT_OUTLIER_THRESHOLD_PCT);
    assert_eq!(parsed, expected);
}

#[test]
fn analyze_exclude_and_scale_grouping() {
    let jobs = scratch("jobs-scale.csv", JOBS);
    let j = jobs.to_str().unwrap();
    let json = stdout(&ofu(&["analyze", "--jobs", j, "--exclude", "c", "--format", "json"]));
    let parsed: DivergenceReport = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.job_count, 4);
    assert!(parsed.outliers.is_empty());

    let csv = stdout(&ofu(&["analyze", "--jobs", j, "--by-scale", "--format", "csv"]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("gpus,jobs,mean_mfu,std_mfu,mean_abs_err,std_abs_err"));
    let gpus: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(gpus, ["8", "64", "512"]);
}

#[test]
fn arch_db_flag_and_env_fallback() {
    let db = scratch(
        "arch.toml",
        "[[arch]]\nname = \"TestGPU\"\nsm_count = 10\nsm_boost_clock_mhz = 1000.0\n\
         [arch.precisions.FP16]\ntensor_clock_mhz = 1000.0\nflops_per_cycle_per_sm = 1000\n",
    );
    let json = stdout(&ofu(&["peak", "--arch-db", db.to_str().unwrap(), "--arch", "TestGPU", "--format", "json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v[0]["tflops"].as_f64().unwrap(), 10.0);

    let out = Command::new(env!("CARGO_BIN_EXE_ofu"))
        .args(["peak", "--arch", "testgpu", "--format", "csv"])
        .env("OFU_ARCH_DB", &db)
        .output()
        .unwrap();
    assert!(stdout(&out).contains("TestGPU,FP16,10"));

    let broken = scratch("broken.toml", "[[arch]]\nname = \"X\"\nsm_count = \"many\"\n");
    let out = ofu(&["peak", "--arch-db", broken.to_str().unwrap(), "--arch", "X"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_and_input_errors_exit_one() {
    let out = ofu(&["peak", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--bogus"), "{err}");
    assert!(err.contains("remedy"), "{err}");
    assert_eq!(err.lines().count(), 2, "{err}");

    assert_eq!(ofu(&["ofu", "--trace", "/definitely/missing.csv"]).status.code(), Some(1));
    assert_eq!(ofu(&["peak", "--arch", "NoSuchGPU"]).status.code(), Some(1));
    assert_eq!(ofu(&["peak", "--precision", "FP4"]).status.code(), Some(1));
    assert_eq!(ofu(&["ofu", "--trace", "x.csv", "--precision", "FP99"]).status.code(), Some(1));
    assert_eq!(ofu(&["study", "--intervals", "2.5"]).status.code(), Some(1));
    assert_eq!(ofu(&[]).status.code(), Some(1));
    assert!(ofu(&["--help"]).status.success());
}
