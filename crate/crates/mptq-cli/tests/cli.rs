//! End-to-end checks of the CLI contract: subcommand wiring, config file
//! plus flag overrides, exit codes, and deterministic outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mptq"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn mptq");
    assert!(
        out.status.success(),
        "mptq {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup_inputs(dir: &Path) {
    run_ok(&["gen-model", "--seed", "3", "--out", "model.bin"], dir);
    run_ok(
        &[
            "gen-data",
            "--seed",
            "3",
            "--out",
            "data.bin",
            "--samples",
            "12",
            "--tokens",
            "6",
        ],
        dir,
    );
}

#[test]
fn quantize_sp_writes_model_and_report() {
    let dir = tempfile::tempdir().unwrap();
    setup_inputs(dir.path());
    let config = serde_json::json!({
        "mode": "sp",
        "model_path": "model.bin",
        "data_path": "data.bin",
        "sample_count": 4,
        "seed": 1
    });
    std::fs::write(dir.path().join("c.json"), config.to_string()).unwrap();
    run_ok(
        &[
            "quantize", "--config", "c.json", "--mode", "sp", "--bits", "6", "--out", "q.bin",
        ],
        dir.path(),
    );
    assert!(dir.path().join("q.bin").exists());
    assert!(dir.path().join("q.bin.quant.json").exists());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("q.bin.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["mode"], "sp");
    // uniform six bits everywhere
    assert_eq!(report["mean_weight_bits"], 6.0);
    assert_eq!(report["mean_act_bits"], 6.0);
    // histogram entries sum to the number of sites
    let hist = report["bit_histogram"].as_object().unwrap();
    let total: u64 = hist.values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(
        total as usize,
        report["per_layer_bits"].as_object().unwrap().len()
    );
}

#[test]
fn allocate_records_metric_mode() {
    let dir = tempfile::tempdir().unwrap();
    setup_inputs(dir.path());
    run_ok(
        &[
            "allocate",
            "--model",
            "model.bin",
            "--data",
            "data.bin",
            "--samples",
            "4",
            "--bw",
            "5",
            "--ba",
            "5",
            "--metric",
            "sqnr-only",
            "--out",
            "plan.json",
        ],
        dir.path(),
    );
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("plan.json")).unwrap())
            .unwrap();
    assert_eq!(plan["metric_mode"], "sqnr-only");
    assert_eq!(plan["target_weight_bits"], 5.0);
    assert!(!plan["trace"].as_array().unwrap().is_empty());
}

#[test]
fn missing_model_exits_one_naming_load_stage() {
    let dir = tempfile::tempdir().unwrap();
    setup_inputs(dir.path());
    let out = bin()
        .args([
            "quantize", "--model", "nope.bin", "--data", "data.bin", "--out", "q.bin",
        ])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("load"), "stderr: {stderr}");
}

#[test]
fn unknown_flag_exits_two() {
    let out = bin().args(["quantize", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flag_values_exit_two() {
    for args in [
        vec![
            "quantize", "--model", "m", "--data", "d", "--out", "o", "--mode", "qp",
        ],
        vec![
            "quantize", "--model", "m", "--data", "d", "--out", "o", "--metric", "bogus",
        ],
        vec![
            "quantize",
            "--model",
            "m",
            "--data",
            "d",
            "--out",
            "o",
            "--strategy",
            "x",
        ],
        vec![
            "allocate", "--model", "m", "--data", "d", "--out", "o", "--order", "sideways",
        ],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn identical_config_and_seed_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    setup_inputs(dir.path());
    let args = [
        "quantize",
        "--model",
        "model.bin",
        "--data",
        "data.bin",
        "--samples",
        "6",
        "--mode",
        "mp",
        "--bw",
        "5",
        "--ba",
        "5",
        "--strategy",
        "sq-b",
        "--seed",
        "42",
    ];
    let mut first = args.to_vec();
    first.extend(["--out", "a.bin"]);
    run_ok(&first, dir.path());
    let mut second = args.to_vec();
    second.extend(["--out", "b.bin"]);
    run_ok(&second, dir.path());
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_eq!(read("a.bin.quant.json"), read("b.bin.quant.json"));
    assert_eq!(read("a.bin.report.json"), read("b.bin.report.json"));
    assert_eq!(read("a.bin.plan.json"), read("b.bin.plan.json"));
    assert_eq!(read("a.bin.redist.json"), read("b.bin.redist.json"));
}

#[test]
fn eval_and_report_consume_quantize_outputs() {
    let dir = tempfile::tempdir().unwrap();
    setup_inputs(dir.path());
    run_ok(
        &[
            "quantize",
            "--model",
            "model.bin",
            "--data",
            "data.bin",
            "--samples",
            "4",
            "--mode",
            "sp",
            "--bits",
            "8",
            "--out",
            "q.bin",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "eval",
            "--model",
            "model.bin",
            "--quantized",
            "q.bin",
            "--data",
            "data.bin",
            "--out",
            "eval.json",
        ],
        dir.path(),
    );
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap())
            .unwrap();
    assert!(eval["end_to_end_sqnr_db"].as_f64().unwrap() > 20.0);
    let out = run_ok(&["report", "--in", "q.bin.report.json"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("end-to-end SQNR"));
    assert!(text.contains("patch_embed.weight"));
}

#[test]
fn saved_plan_can_be_applied_and_printed() {
    let dir = tempfile::tempdir().unwrap();
    setup_inputs(dir.path());
    run_ok(
        &[
            "allocate",
            "--model",
            "model.bin",
            "--data",
            "data.bin",
            "--samples",
            "4",
            "--bw",
            "6",
            "--ba",
            "6",
            "--seed",
            "9",
            "--out",
            "plan.json",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "quantize",
            "--model",
            "model.bin",
            "--data",
            "data.bin",
            "--samples",
            "4",
            "--mode",
            "mp",
            "--bw",
            "6",
            "--ba",
            "6",
            "--seed",
            "9",
            "--plan",
            "plan.json",
            "--out",
            "q.bin",
        ],
        dir.path(),
    );
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("q.bin.report.json")).unwrap(),
    )
    .unwrap();
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("plan.json")).unwrap())
            .unwrap();
    // the applied bits match the plan exactly
    for e in plan["entries"].as_array().unwrap() {
        let site = e["layer_id"].as_str().unwrap();
        assert_eq!(report["per_layer_bits"][site], e["bits"], "{site}");
    }
    let out = run_ok(&["report", "--in", "plan.json"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("allocation plan"), "{text}");
}

#[test]
fn calibrate_writes_site_summary() {
    let dir = tempfile::tempdir().unwrap();
    setup_inputs(dir.path());
    run_ok(
        &[
            "calibrate",
            "--model",
            "model.bin",
            "--data",
            "data.bin",
            "--samples",
            "1",
            "--out",
            "calib.json",
        ],
        dir.path(),
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("calib.json")).unwrap())
            .unwrap();
    assert_eq!(summary["sample_count"], 1);
    assert!(summary["gelu_stats"].as_object().unwrap().len() == 4);
}

#[test]
fn gen_data_path() {
    // PathBuf flags accept nested paths
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("sub");
    std::fs::create_dir(&nested).unwrap();
    let out: PathBuf = nested.join("pool.bin");
    run_ok(
        &["gen-data", "--seed", "1", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.exists());
}
