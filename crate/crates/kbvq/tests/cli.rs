//! Command-line interface contract: exit codes, JSON report keys, and the
//! file-based quantize/eval flow.

use kbvq::numerics::Matrix;
use kbvq::tensor_file::write_tensors;
use std::path::Path;
use std::process::{Command, Output};

fn kbvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbvq"))
        .args(args)
        .output()
        .expect("spawn kbvq")
}

/// Small synthetic layer so each invocation stays fast.
const SMALL_SYNTH: &[&str] = &[
    "--d-model",
    "16",
    "--oc",
    "8",
    "--n-experts",
    "4",
    "--shared-rank",
    "2",
    "--batch",
    "32",
    "--vq-d",
    "2",
    "--k-ratio",
    "1/8",
    "--iters",
    "25",
];

#[test]
fn quantize_then_eval_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b.kbvq");
    let mut args = vec!["quantize", "--out", bundle.to_str().unwrap()];
    args.extend_from_slice(SMALL_SYNTH);
    let out = kbvq(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = kbvq(&["--json", "eval", "--bundle", bundle.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in [
        "effective_bits",
        "compression_ratio",
        "output_mse",
        "mean_shift_median",
        "var_ratio_median",
        "rho_k",
    ] {
        assert!(parsed.get(key).is_some(), "missing report key {key}");
        assert!(parsed[key].is_number(), "key {key} is not a number");
    }
}

#[test]
fn config_errors_exit_2() {
    let out = kbvq(&["quantize", "--k-ratio", "2.0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = kbvq(&["quantize", "--bits", "8", "--vq-d", "4"]);
    assert_eq!(out.status.code(), Some(2), "b*v guard should trip");

    let out = kbvq(&["report", "--m", "0", "--l", "16"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_bundle_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b.kbvq");
    let mut args = vec!["quantize", "--out", bundle.to_str().unwrap()];
    args.extend_from_slice(SMALL_SYNTH);
    assert!(kbvq(&args).status.success());

    let mut bytes = std::fs::read(&bundle).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x5A;
    std::fs::write(&bundle, bytes).unwrap();
    let out = kbvq(&["eval", "--bundle", bundle.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_file_exits_4() {
    let out = kbvq(&["eval", "--bundle", "/nonexistent/path.kbvq"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn file_based_quantize_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let experts_path = dir.path().join("experts.kbt");
    let calib_path = dir.path().join("calib.kbt");
    let eval_path = dir.path().join("eval.kbt");
    let bundle = dir.path().join("b.kbvq");

    // Deterministic toy group: four 6x8 experts plus a router.
    let make = |salt: usize| {
        Matrix::from_fn(6, 8, |i, j| {
            ((i * 8 + j + salt) as f64 * 0.37).sin() * 0.5 + (j as f64 * 0.1)
        })
    };
    let tensors: Vec<(String, Matrix)> = (0..4)
        .map(|i| (format!("expert.{i}"), make(i * 31)))
        .chain(std::iter::once((
            "gate".to_string(),
            Matrix::from_fn(4, 8, |i, j| ((i + j) as f64 * 0.21).cos()),
        )))
        .collect();
    let refs: Vec<(String, &Matrix)> = tensors.iter().map(|(n, m)| (n.clone(), m)).collect();
    write_tensors(&experts_path, &refs).unwrap();

    let calib = Matrix::from_fn(40, 8, |t, j| ((t * 8 + j) as f64 * 0.11).sin() + 0.8);
    write_tensors(&calib_path, &[("calib".to_string(), &calib)]).unwrap();
    let eval = Matrix::from_fn(40, 8, |t, j| ((t * 8 + j) as f64 * 0.13).cos() + 0.8);
    write_tensors(&eval_path, &[("eval".to_string(), &eval)]).unwrap();

    let out = kbvq(&[
        "quantize",
        "--experts",
        experts_path.to_str().unwrap(),
        "--calib",
        calib_path.to_str().unwrap(),
        "--out",
        bundle.to_str().unwrap(),
        "--vq-d",
        "2",
        "--k-ratio",
        "1/8",
        "--iters",
        "25",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = kbvq(&[
        "--json",
        "eval",
        "--bundle",
        bundle.to_str().unwrap(),
        "--experts",
        experts_path.to_str().unwrap(),
        "--eval",
        eval_path.to_str().unwrap(),
        "--top-k",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(parsed["output_mse"].as_f64().unwrap().is_finite());

    // Quantizing a file-based bundle leaves no synthetic provenance, so
    // eval without the expert file is a config error.
    let out = kbvq(&["eval", "--bundle", bundle.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_reference_configuration() {
    let out = kbvq(&[
        "--json",
        "report",
        "--m",
        "5632",
        "--l",
        "2048",
        "--n-experts",
        "64",
        "--bits",
        "2",
        "--vq-d",
        "4",
        "--k-ratio",
        "1/128",
    ]);
    assert!(out.status.success());
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(parsed["total_bits"].as_f64().unwrap(), 1_516_634_112.0);
    let ratio = parsed["compression_ratio"].as_f64().unwrap();
    assert_eq!((ratio * 100.0).round(), 87.0);
}

#[test]
fn sweep_and_ablate_emit_rows() {
    let mut args = vec!["--json", "sweep-rank", "--k-ratios", "1/8,1/4"];
    args.extend_from_slice(SMALL_SYNTH);
    let out = kbvq(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(rows[0]["output_mse"].is_number());

    let mut args = vec!["--json", "ablate"];
    args.extend_from_slice(SMALL_SYNTH);
    let out = kbvq(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let arms: Vec<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["arm"].as_str().unwrap())
        .collect();
    assert_eq!(
        arms,
        vec![
            "none",
            "bcos-only",
            "idre-only",
            "full",
            "idre-only/no-klt",
            "full/no-klt"
        ]
    );
}

#[test]
fn bundle_files_are_portable_fixed_endian() {
    // The format is little-endian by definition; a bundle written here must
    // parse from its raw bytes alone.
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b.kbvq");
    let mut args = vec!["quantize", "--out", bundle.to_str().unwrap()];
    args.extend_from_slice(SMALL_SYNTH);
    assert!(kbvq(&args).status.success());
    let bytes = std::fs::read(&bundle).unwrap();
    assert_eq!(&bytes[..8], b"KBVQMOE1");
    let parsed = kbvq::bundle::QuantizedBundle::deserialize(&bytes).unwrap();
    assert_eq!(parsed.groups.len(), 1);
    assert!(Path::new(&bundle).exists());
}
