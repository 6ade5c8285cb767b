use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use approx::assert_abs_diff_eq;
use sls_cli::output::RunManifest;
use sls_core::error_model::{ErrorModel, TrajectoryDataset};
use sls_core::experiment::ExperimentReport;
use sls_core::fir::{FirController, FirOperator, SystemResponses};
use sls_core::lti::quadrotor_plant;
use sls_core::sim::SimLog;
use sls_core::synthesis::{stacked_cost, CostSpec, GuaranteeReport, SolverSettings, SynthesisProblem};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sls-robust"));
    cmd.arg("--quiet");
    cmd
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file in the directory except the manifest is listed with its current hash.
fn assert_manifest_complete(dir: &Path) {
    let manifest: RunManifest = read(&dir.join("manifest.json"));
    let mut on_disk: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut listed: Vec<String> = manifest.artifacts.iter().map(|a| a.path.clone()).collect();
    listed.sort();
    assert_eq!(on_disk, listed);
    for a in &manifest.artifacts {
        let bytes = fs::read(dir.join(&a.path)).unwrap();
        assert_eq!(sls_cli::output::sha256_hex(&bytes), a.sha256, "{}", a.path);
    }
}

const DEADBEAT: &str = r#"{
  "seed": 1,
  "horizon": 2,
  "plant": { "A": [[0.0]], "B": [[1.0]], "C": [[1.0]], "H": [[1.0]], "dt": 0.1 },
  "error_model": { "radius": 2.5, "slope": { "source": "fixed", "value": 0.0 }, "epsilon_e": 0.1 }
}"#;

#[test]
fn deadbeat_config_emits_the_unique_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "deadbeat.json", DEADBEAT);
    let out = run(tmp.path(), &["synthesize", "--config", cfg.to_str().unwrap(), "--out", "syn"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("syn");
    let resp: SystemResponses = read(&dir.join("responses.json"));
    assert_abs_diff_eq!(resp.phi_xw.tap(1)[(0, 0)], 1.0, epsilon = 1e-8);
    for (op, skip_first) in [(&resp.phi_xw, true), (&resp.phi_xe, false), (&resp.phi_uw, false), (&resp.phi_ue, false)] {
        for t in 1..=2 {
            if !(skip_first && t == 1) {
                assert!(op.tap(t)[(0, 0)].abs() < 1e-8);
            }
        }
    }
    assert_manifest_complete(&dir);
}

#[test]
fn written_json_reads_back_to_the_same_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "deadbeat.json", DEADBEAT);
    assert_eq!(code(&run(tmp.path(), &["synthesize", "--config", cfg.to_str().unwrap(), "--out", "syn"])), 0);
    let dir = tmp.path().join("syn");
    let check = |name: &str, reser: &dyn Fn(&str) -> String| {
        let text = fs::read_to_string(dir.join(name)).unwrap();
        assert_eq!(reser(&text), text, "{name}");
    };
    let pretty = |v: String| v + "\n";
    check("responses.json", &|t| {
        pretty(serde_json::to_string_pretty(&serde_json::from_str::<SystemResponses>(t).unwrap()).unwrap())
    });
    check("controller.json", &|t| {
        pretty(serde_json::to_string_pretty(&serde_json::from_str::<FirController>(t).unwrap()).unwrap())
    });
    check("guarantee.json", &|t| {
        pretty(serde_json::to_string_pretty(&serde_json::from_str::<GuaranteeReport>(t).unwrap()).unwrap())
    });
    // The effective configuration is itself a valid config.
    let again = run(tmp.path(), &["synthesize", "--config", "syn/config.json", "--out", "syn2"]);
    assert_eq!(code(&again), 0);
    assert_eq!(
        fs::read(tmp.path().join("syn2/responses.json")).unwrap(),
        fs::read(dir.join("responses.json")).unwrap()
    );
}

#[test]
fn hand_written_dataset_gives_the_pairwise_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "scalar.json", DEADBEAT);
    let data = write(tmp.path(), "three.csv", "t,x0,y0\n0,0,0\n1,1,1.3\n2,3,3.3\n");
    let out = run(
        tmp.path(),
        &["fit-error", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--out", "fit"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model: ErrorModel = read(&tmp.path().join("fit/error_model.json"));
    assert_abs_diff_eq!(model.s_hat_max, 0.3, epsilon = 1e-12);
    assert_abs_diff_eq!(model.epsilon_e, 0.3, epsilon = 1e-12);
    assert_manifest_complete(&tmp.path().join("fit"));
}

#[test]
fn malformed_dataset_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "scalar.json", DEADBEAT);
    let data = write(tmp.path(), "bad.csv", "t,x0,y0\n0,0,0\n1,NaN,1.3\n");
    let out = run(tmp.path(), &["fit-error", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn isolated_samples_are_a_no_neighbors_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "scalar.json", DEADBEAT);
    let data = write(tmp.path(), "far.csv", "t,x0,y0\n0,0,0\n1,10,10\n");
    let out = run(tmp.path(), &["fit-error", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no pair"));
}

const IDEAL: &str = r#"{
  "seed": 5,
  "robustness": { "eps_w": 0.0 },
  "reference": { "laps": 0.5 },
  "perception": {
    "bias_amplitudes": [0, 0, 0, 0, 0, 0],
    "bias_frequencies": [0, 0, 0, 0, 0, 0],
    "bias_directions": [[0,0,0,0,0,0],[0,0,0,0,0,0],[0,0,0,0,0,0],[0,0,0,0,0,0],[0,0,0,0,0,0],[0,0,0,0,0,0]],
    "bias_phases": [0, 0, 0, 0, 0, 0],
    "noise_amplitude": 0.0
  }
}"#;

#[test]
fn ideal_pd_simulation_tracks_exactly_and_fits_a_zero_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ideal.json", IDEAL);
    let out = run(tmp.path(), &["simulate", "--config", cfg.to_str().unwrap(), "--out", "sim"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("sim");
    let log = SimLog::read_csv(fs::File::open(dir.join("sim.csv")).unwrap(), 6, 6, 3, "sim.csv").unwrap();
    assert_eq!(log.len(), 50);
    for k in 0..log.len() {
        assert!((&log.x[k] - &log.x_ref[k]).amax() < 1e-9, "step {k}");
        assert_eq!(log.e_norm[k], 0.0);
    }
    assert_manifest_complete(&dir);

    let fit = run(
        tmp.path(),
        &["fit-error", "--config", cfg.to_str().unwrap(), "--dataset", "sim/dataset.csv", "--out", "fit"],
    );
    assert_eq!(code(&fit), 0, "{}", String::from_utf8_lossy(&fit.stderr));
    let model: ErrorModel = read(&tmp.path().join("fit/error_model.json"));
    assert_eq!(model.epsilon_e, 0.0);
    assert_eq!(model.s_hat_max, 0.0);
}

#[test]
fn simulation_csv_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &["simulate", "--seed", "3", "--steps", "40", "--out", "a"])), 0);
    let text = fs::read(tmp.path().join("a/sim.csv")).unwrap();
    let log = SimLog::read_csv(text.as_slice(), 6, 6, 3, "sim.csv").unwrap();
    let mut again = Vec::new();
    log.write_csv(&mut again).unwrap();
    assert_eq!(again, text);
    let data_text = fs::read(tmp.path().join("a/dataset.csv")).unwrap();
    let data = TrajectoryDataset::read_csv(data_text.as_slice(), "dataset.csv").unwrap();
    let mut again = Vec::new();
    data.write_csv(&mut again).unwrap();
    assert_eq!(again, data_text);
}

#[test]
fn repeated_simulation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for dir in ["a", "b"] {
        assert_eq!(code(&run(tmp.path(), &["simulate", "--seed", "11", "--degradation", "4", "--out", dir])), 0);
    }
    for name in ["sim.csv", "dataset.csv", "metrics.json", "config.json"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(name)).unwrap(),
            fs::read(tmp.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

fn impulse_columns(path: &Path, prefix: &str) -> Vec<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with(prefix)).collect();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            cols.iter().map(|&i| r[i].parse().unwrap()).collect()
        })
        .collect()
}

fn assert_taps_match(rows: &[Vec<f64>], op: &FirOperator, col: usize, horizon: usize) {
    for (t, row) in rows.iter().enumerate().take(horizon + 1).skip(1) {
        let tap = op.tap(t);
        for (i, v) in row.iter().enumerate() {
            assert!((v - tap[(i, col)]).abs() <= 1e-6, "tap {t} row {i}: {v} vs {}", tap[(i, col)]);
        }
    }
}

#[test]
fn impulse_mode_reproduces_the_response_taps() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = run(tmp.path(), &["synthesize", "--seed", "2024", "--out", "syn"]);
    assert_eq!(code(&syn), 0, "{}", String::from_utf8_lossy(&syn.stderr));
    let resp: SystemResponses = read(&tmp.path().join("syn/responses.json"));
    for (kind, index) in [("state", 0usize), ("state", 4), ("measurement", 2)] {
        let dir = format!("imp_{kind}_{index}");
        let out = run(
            tmp.path(),
            &[
                "simulate",
                "--controller",
                "syn/controller.json",
                "--impulse",
                kind,
                "--index",
                &index.to_string(),
                "--out",
                &dir,
            ],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let path = tmp.path().join(&dir).join("impulse.csv");
        let (xs, us) = (impulse_columns(&path, "dx"), impulse_columns(&path, "du"));
        let (x_op, u_op) = if kind == "state" {
            (&resp.phi_xw, &resp.phi_uw)
        } else {
            (&resp.phi_xe, &resp.phi_ue)
        };
        assert_taps_match(&xs, x_op, index, resp.horizon);
        assert_taps_match(&us, u_op, index, resp.horizon);
    }
}

#[test]
fn imitation_stays_closer_to_the_nominal_than_the_quadratic_design() {
    let tmp = tempfile::tempdir().unwrap();
    for design in ["nominal-l1", "robust-quadratic", "robust-imitation"] {
        let out = run(tmp.path(), &["synthesize", "--seed", "2024", "--design", design, "--out", design]);
        assert_eq!(code(&out), 0, "{design}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let nominal: SystemResponses = read(&tmp.path().join("nominal-l1/responses.json"));
    let cfg: sls_core::experiment::ExperimentConfig = read(&tmp.path().join("nominal-l1/config.json"));
    let sys = quadrotor_plant(cfg.params(), cfg.system.dt).unwrap();
    let (q, r) = cfg.weights(&sys).unwrap();
    let problem = SynthesisProblem {
        sys,
        horizon: cfg.horizon,
        eps_w: 1.0,
        bounds: sls_core::error_model::PerceptionBounds {
            slope: 0.0,
            epsilon_e: 1.0,
            radius: 1.0,
        },
        d_max: 0.0,
        robustness_enabled: false,
        margin: 1e-3,
        r0: None,
        cost: CostSpec::imitation(q, r, nominal),
        solver: SolverSettings::default(),
    };
    let distance = |name: &str| {
        let resp: SystemResponses = read(&tmp.path().join(name).join("responses.json"));
        stacked_cost(&problem, &resp).unwrap()
    };
    let imitation = distance("robust-imitation");
    let quadratic = distance("robust-quadratic");
    assert!(imitation <= quadratic + 1e-6, "{imitation} vs {quadratic}");
}

#[test]
fn matched_large_slope_is_infeasible_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "steep.json",
        r#"{ "seed": 1, "error_model": { "slope": { "source": "fixed", "value": 11.7 } } }"#,
    );
    let out = run(tmp.path(), &["synthesize", "--config", cfg.to_str().unwrap(), "--out", "inf"]);
    assert_eq!(code(&out), 2);
    let report: serde_json::Value = read(&tmp.path().join("inf/infeasibility.json"));
    assert_eq!(report["binding"], "perception_slope");
    assert_manifest_complete(&tmp.path().join("inf"));
}

#[test]
fn schema_errors_exit_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write(tmp.path(), "unknown.json", r#"{ "seed": 1, "horizn": 20 }"#);
    assert_eq!(code(&run(tmp.path(), &["synthesize", "--config", unknown.to_str().unwrap()])), 4);
    let negative = write(tmp.path(), "neg.json", r#"{ "seed": 1, "robustness": { "margin": 0.0 } }"#);
    assert_eq!(code(&run(tmp.path(), &["synthesize", "--config", negative.to_str().unwrap()])), 4);
    assert_eq!(code(&run(tmp.path(), &["experiment"])), 4);
    assert_eq!(code(&run(tmp.path(), &["synthesize", "--config", "missing.json"])), 4);
    assert_eq!(code(&run(tmp.path(), &["no-such-command"])), 4);
}

#[test]
fn seed_flag_overrides_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "seeded.json", r#"{ "seed": 1, "reference": { "laps": 0.2 } }"#);
    assert_eq!(code(&run(tmp.path(), &["simulate", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", "a"])), 0);
    let effective: serde_json::Value = read(&tmp.path().join("a/config.json"));
    assert_eq!(effective["seed"], 9);
    assert_eq!(effective["reference"]["laps"], 0.2);
}

#[test]
fn verify_accepts_synthesized_and_rejects_tampered_responses() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &["synthesize", "--seed", "2024", "--out", "syn"])), 0);
    let ok = run(tmp.path(), &["verify", "--seed", "2024", "--responses", "syn/responses.json", "--out", "v"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = read(&tmp.path().join("v/verify.json"));
    assert_eq!(report["achievable"], true);
    assert_eq!(report["robustness"]["satisfied"], true);

    let mut text: serde_json::Value = read(&tmp.path().join("syn/responses.json"));
    text["phi_xw"]["taps"][3][0][0] = serde_json::json!(0.5);
    fs::write(tmp.path().join("tampered.json"), text.to_string()).unwrap();
    let bad = run(tmp.path(), &["verify", "--seed", "2024", "--responses", "tampered.json", "--out", "v2"]);
    assert_eq!(code(&bad), 2);

    // The unconstrained design is achievable but breaks the robustness row at a large slope.
    assert_eq!(code(&run(tmp.path(), &["synthesize", "--seed", "2024", "--design", "nominal-l1", "--out", "nom"])), 0);
    let steep = write(
        tmp.path(),
        "steep.json",
        r#"{ "seed": 2024, "error_model": { "slope": { "source": "fixed", "value": 1.0 }, "epsilon_e": 0.09 } }"#,
    );
    let row = run(
        tmp.path(),
        &["verify", "--config", steep.to_str().unwrap(), "--responses", "nom/responses.json", "--out", "v3"],
    );
    assert_eq!(code(&row), 2);
    let skip = run(
        tmp.path(),
        &[
            "verify",
            "--config",
            steep.to_str().unwrap(),
            "--responses",
            "nom/responses.json",
            "--skip-robustness",
            "--out",
            "v4",
        ],
    );
    assert_eq!(code(&skip), 0);
}

const SMALL_EXPERIMENT: &str = r#"{ "seed": 77, "runs": 3, "steps": 120 }"#;

#[test]
fn experiment_writes_eight_cells_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.json", SMALL_EXPERIMENT);
    for dir in ["a", "b"] {
        let out = run(tmp.path(), &["experiment", "--config", cfg.to_str().unwrap(), "--out", dir]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let report: ExperimentReport = read(&tmp.path().join("a/report.json"));
    assert_eq!(report.cells.len(), 8);
    for name in ["report.json", "runs.csv", "tracking.csv", "error_norm.csv", "config.json"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(name)).unwrap(),
            fs::read(tmp.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    assert_manifest_complete(&tmp.path().join("a"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.json", SMALL_EXPERIMENT);
    let capped = bin()
        .current_dir(tmp.path())
        .env("SLS_ROBUST_THREADS", "1")
        .args(["experiment", "--config", cfg.to_str().unwrap(), "--out", "one"])
        .output()
        .unwrap();
    assert_eq!(code(&capped), 0);
    let free = run(tmp.path(), &["experiment", "--config", cfg.to_str().unwrap(), "--out", "many"]);
    assert_eq!(code(&free), 0);
    assert_eq!(
        fs::read(tmp.path().join("one/report.json")).unwrap(),
        fs::read(tmp.path().join("many/report.json")).unwrap()
    );
}
