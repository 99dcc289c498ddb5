mod common;

use common::*;

const BIN: &str = env!("CARGO_BIN_EXE_mmlab");

fn write_config(dir: &tempfile::TempDir, text: &str) -> String {
    let p = dir.path().join("c.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn every_command_is_byte_deterministic() {
    let n = cli_determinism(BIN).unwrap();
    // norm stats, LIN grid, training artefacts, backtest and sweep outputs
    assert!(n >= 15, "only {n} files");
}

#[test]
fn explosive_kernel_is_rejected_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    // scaling beta by 1/10 lifts the spectral radius above 1
    let text = small_config_text().replace("beta = 2.0", "beta = 0.2");
    let cfg = write_config(&dir, &text);
    let out = dir.path().join("o");
    let (ok, _, err) = run_cli(BIN, &["backtest", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!ok);
    assert!(err.contains("hawkes.alpha"), "{err}");
    assert!(!out.join("summary.txt").exists());
}

#[test]
fn out_of_range_probability_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = small_config_text().replacen("z3 = 0.25", "z3 = 1.5", 1);
    let cfg = write_config(&dir, &text);
    let (ok, _, err) = run_cli(BIN, &["simulate", "--config", &cfg]);
    assert!(!ok);
    assert!(err.contains("z3"), "{err}");
}

#[test]
fn usage_errors() {
    for args in [&["frobnicate"][..], &["backtest", "--bogus"], &[]] {
        let (ok, _, err) = run_cli(BIN, args);
        assert!(!ok, "{args:?} succeeded");
        assert!(err.to_lowercase().contains("usage"), "{args:?}: {err}");
    }
    let (ok, out, _) = run_cli(BIN, &["--help"]);
    assert!(ok);
    for cmd in ["calibrate-norm", "train", "backtest", "grid-lin", "sweep-noise", "sweep-fees", "simulate"] {
        assert!(out.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn unknown_controller_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, &small_config_text());
    let out = dir.path().join("o");
    let (ok, _, err) = run_cli(
        BIN,
        &["backtest", "--config", &cfg, "--out", out.to_str().unwrap(), "--controller", "nope.ckpt"],
    );
    assert!(!ok);
    assert!(err.contains("nope.ckpt"), "{err}");
}

#[test]
fn backtest_outputs_carry_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, &small_config_text());
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    let (ok, _, err) = run_cli(BIN, &["backtest", "--config", &cfg, "--out", o, "--seed", "11", "--controller", "sym"]);
    assert!(ok, "{err}");
    let csv = std::fs::read_to_string(out.join("episodes_sym.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.starts_with('#') && first.contains("seed") && first.contains("11"), "{first}");
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 20 + 1);
    let json = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(json.contains("config_hash") && json.contains("11"));
}
