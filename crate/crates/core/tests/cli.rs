use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mjls_core::config::{GainsFile, Problem};
use mjls_core::embedding::ExtendedChain;
use mjls_core::certify_mss;
use serde_json::{json, Value};
use tempfile::TempDir;

const BENCHMARK: &str = include_str!("../../../configs/benchmark.json");

fn mjls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mjls")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, config: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn scalar_config(a: f64, b: f64) -> Value {
    json!({
        "system": {"A": [[[a]]], "B": [[[b]]], "P": [[1.0]]},
        "observation": {"custom": {"Q": [[1.0]], "lambda_set": [1]}},
        "T": 1,
        "sim": {"x0": [1.0], "horizon": 5, "num_paths": 3}
    })
}

fn parse_ratio(text: &str) -> f64 {
    text.trim().strip_prefix("decay_ratio ").expect("decay line").parse().unwrap()
}

#[test]
fn benchmark_pipeline() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "bench.json", &serde_json::from_str(BENCHMARK).unwrap());
    let out_dir = dir.path().join("out");
    let out_str = out_dir.to_str().unwrap();

    let synth = mjls(&["synthesize", &config, "--out-dir", out_str, "--seed", "3"]);
    assert_eq!(synth.status.code(), Some(0), "{}", stderr(&synth));
    let cert = read_json(&out_dir.join("certificate.json"));
    let rho = cert["spectral_radius"].as_f64().unwrap();
    assert!(rho < 1.0);
    assert_eq!(cert["status"], "feasible");
    assert_eq!(cert["operator_dim"], 720);
    let gains = read_json(&out_dir.join("gains.json"));
    assert_eq!(gains["gains"].as_array().unwrap().len(), 12);
    assert_eq!(gains["seed"], 3);
    let hash = cert["config_hash"].as_str().unwrap().to_string();
    assert_eq!(gains["config_hash"], hash.as_str());
    let log = fs::read_to_string(out_dir.join("solver_log.txt")).unwrap();
    assert!(log.starts_with(&format!("# config_hash {hash} seed 3")));

    // Re-reading the gains file certifies to the same spectral radius.
    let problem = Problem::from_json(BENCHMARK).unwrap();
    let file: GainsFile = serde_json::from_value(gains).unwrap();
    let chain = ExtendedChain::build(&problem.model, &problem.obs).unwrap();
    let again = certify_mss(&problem.model, &chain, &file.to_schedule().unwrap()).unwrap();
    assert!((again.spectral_radius - rho).abs() <= 1e-12);

    let gains_path = out_dir.join("gains.json");
    let sim = mjls(&["simulate", &config, gains_path.to_str().unwrap(), "--out-dir", out_str]);
    assert_eq!(sim.status.code(), Some(0), "{}", stderr(&sim));
    assert!(parse_ratio(&stdout(&sim)) < 1e-2);
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("k,mean_sq_norm"));
    assert_eq!(summary.lines().count(), 52);
    let paths = fs::read_to_string(out_dir.join("paths.csv")).unwrap();
    assert_eq!(paths.lines().next(), Some("path_id,k,sq_norm"));
    assert_eq!(paths.lines().count(), 1 + 100 * 51);
    let meta = read_json(&out_dir.join("simulation.json"));
    assert_eq!(meta["config_hash"], hash.as_str());
    assert_eq!(meta["seed"], 0);

    let horizon0 = mjls(&["simulate", &config, gains_path.to_str().unwrap(), "--out-dir", out_str, "--horizon", "0"]);
    assert_eq!(horizon0.status.code(), Some(0));
    assert_eq!(parse_ratio(&stdout(&horizon0)), 1.0);
    assert_eq!(fs::read_to_string(out_dir.join("summary.csv")).unwrap().lines().count(), 2);

    let embed = mjls(&["validate-embedding", &config, "--out-dir", out_str]);
    assert_eq!(embed.status.code(), Some(0), "{}", stdout(&embed));
    let report = read_json(&out_dir.join("embedding_report.json"));
    assert!(report["report"]["max_abs_error"].as_f64().unwrap() <= 0.02);
    assert_eq!(report["config_hash"], hash.as_str());

    let gaps = mjls(&["gaps", &config, "--out-dir", out_str, "--count", "20000"]);
    assert_eq!(gaps.status.code(), Some(0));
    let first = stdout(&gaps).lines().next().unwrap().to_string();
    let freq: f64 = first.strip_prefix("gap 4: ").expect("shortest gap is 4").parse().unwrap();
    assert!((freq - 0.5).abs() < 0.02, "{first}");
}

#[test]
fn non_stochastic_transition_names_the_field() {
    let dir = TempDir::new().unwrap();
    let mut config: Value = serde_json::from_str(BENCHMARK).unwrap();
    config["system"]["P"][1] = json!([0.5, 0.6, 0.2]);
    let path = write_config(dir.path(), "bad.json", &config);
    let out = mjls(&["synthesize", &path, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("system.P"), "{}", stderr(&out));
}

#[test]
fn malformed_observation_names_the_field() {
    let dir = TempDir::new().unwrap();
    let mut config: Value = serde_json::from_str(BENCHMARK).unwrap();
    config["observation"] = json!({"periodic_with_failures": {"tau": 4, "p": 1.5}});
    let path = write_config(dir.path(), "bad.json", &config);
    let out = mjls(&["synthesize", &path, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("observation.periodic_with_failures.p"), "{}", stderr(&out));
}

#[test]
fn unstable_uncontrollable_scalar_is_a_solver_failure() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), "scalar.json", &scalar_config(2.0, 0.0));
    let out = mjls(&["synthesize", &path, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stdout(&out));
    assert!(!dir.path().join("gains.json").exists());
    let cert = read_json(&dir.path().join("certificate.json"));
    assert!(cert["spectral_radius"].is_null());
}

#[test]
fn controllable_scalar_is_stabilized() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), "scalar.json", &scalar_config(2.0, 1.0));
    let out = mjls(&["synthesize", &path, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let cert = read_json(&dir.path().join("certificate.json"));
    assert!(cert["spectral_radius"].as_f64().unwrap() < 1.0);
}

#[test]
fn zero_system_decays_to_zero() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "zero.json", &scalar_config(0.0, 1.0));
    let gains = json!({
        "config_hash": "", "seed": 0, "N": 1, "T": 1, "m": 1, "n": 1,
        "gains": [{"gamma": 1, "delta": 1, "K": [[0.0]]}]
    });
    let gains_path = write_config(dir.path(), "gains.json", &gains);
    let out = mjls(&["simulate", &config, &gains_path, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(parse_ratio(&stdout(&out)), 0.0);
}

#[test]
fn mismatched_gains_are_rejected() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "bench.json", &serde_json::from_str(BENCHMARK).unwrap());
    let gains = json!({
        "config_hash": "", "seed": 0, "N": 1, "T": 1, "m": 1, "n": 1,
        "gains": [{"gamma": 1, "delta": 1, "K": [[0.0]]}]
    });
    let gains_path = write_config(dir.path(), "gains.json", &gains);
    let out = mjls(&["simulate", &config, &gains_path, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));
}

#[test]
fn trivial_chain_embeds_exactly() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "scalar.json", &scalar_config(0.5, 0.0));
    let out = mjls(&["validate-embedding", &config, "--out-dir", dir.path().to_str().unwrap(), "--steps", "5000"]);
    assert_eq!(out.status.code(), Some(0));
    let report = read_json(&dir.path().join("embedding_report.json"));
    assert_eq!(report["report"]["max_abs_error"], 0.0);
}

#[test]
fn deterministic_cycle_embeds_exactly() {
    let dir = TempDir::new().unwrap();
    let config = json!({
        "system": {"A": [[[0.5]]], "B": [[[1.0]]], "P": [[1.0]]},
        "observation": {"custom": {"Q": [[0, 1, 0], [0, 0, 1], [1, 0, 0]], "lambda_set": [1, 3]}},
        "T": 3,
        "sim": {"x0": [1.0]}
    });
    let path = write_config(dir.path(), "cycle.json", &config);
    let out = mjls(&["validate-embedding", &path, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report = read_json(&dir.path().join("embedding_report.json"));
    assert_eq!(report["report"]["max_abs_error"], 0.0);
    assert_eq!(report["report"]["unexpected_transitions"], 0);
}

#[test]
fn unknown_solver_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let mut config = scalar_config(0.5, 0.0);
    config["solver"] = json!({"method": "simplex"});
    let path = write_config(dir.path(), "s.json", &config);
    let out = mjls(&["synthesize", &path, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("solver.method"), "{}", stderr(&out));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let problem = Problem::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        problem.sim_config().unwrap();
        seen += 1;
    }
    assert!(seen >= 2);
}
