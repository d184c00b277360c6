use std::path::Path;
use std::process::{Command, Output};

use survode_cli::io::{ingest_csv, read_matrix};

fn survode(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_survode"));
    cmd.args(args).env_remove("SURVODE_SEED").env_remove("SURVODE_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const LOGISTIC: &str = r#"
seed = 3
[model]
family = "logistic"
h0 = "kappa"
[model.formulas]
lambda = []
kappa = ["trt"]
[predict]
n_points = 11
t_max = 1.0
km_group = "trt"
[[predict.profiles]]
name = "control"
values = { trt = 0 }
"#;

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "seed = 1\nbogus = 2\n");
    let out_dir = dir.path().join("out");
    let out = survode(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["exit_code"], 2);
    assert!(rec["error"]["message"].as_str().unwrap().contains("bogus"));
}

#[test]
fn malformed_csv_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", LOGISTIC);
    let data = write(dir.path(), "d.csv", "time,status,trt\n1.0,1,0\n2.0,3,1\n");
    let out_dir = dir.path().join("out");
    let out = survode(&["fit", "--config", &cfg, "--data", &data, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    let msg = error_record(&out)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("line 3") && msg.contains("status"), "{msg}");
}

#[test]
fn solver_budget_exhaustion_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        r#"
seed = 1
[model]
family = "hazard_response"
h0 = 0.01
q0 = 1e-6
[solver]
rtol = 1e-8
atol = 1e-10
max_steps = 1
"#,
    );
    let data = write(dir.path(), "d.csv", "time,status\n1.0,1\n2.0,0\n3.0,1\n");
    let out_dir = dir.path().join("out");
    let out = survode(&["fit", "--config", &cfg, "--data", &data, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_record(&out)["error"]["kind"], "numeric");
}

#[test]
fn seed_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[simulate]\nn = 20\nhorizon = 5.0\n");
    let out_dir = dir.path().join("out");
    let out_arg = out_dir.to_str().unwrap();
    let missing = survode(&["simulate", "--config", &cfg, "--out", out_arg], &[]);
    assert_eq!(missing.status.code(), Some(2));

    let ok = survode(&["simulate", "--config", &cfg, "--out", out_arg], &[("SURVODE_SEED", "77")]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let text = std::fs::read_to_string(out_dir.join("data.csv")).unwrap();
    assert!(text.lines().next().unwrap().contains("seed=77"));
    assert_eq!(ingest_csv(&out_dir.join("data.csv")).unwrap().n(), 20);
}

#[test]
fn point_mass_draws_give_exact_survival() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &LOGISTIC.replace("h0 = \"kappa\"", "h0 = \"kappa\"\nmax_time = 1.0"));
    let kappa = 2f64.ln();
    let rows: String = (0..20).map(|_| format!("0.5,{kappa},0\n")).collect();
    let draws = write(dir.path(), "draws.csv", &format!("lambda:intercept,kappa:intercept,kappa:trt\n{rows}"));
    let out_dir = dir.path().join("out");
    let out = survode(&["predict", "--config", &cfg, "--draws", &draws, "--out", out_dir.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let text = std::fs::read_to_string(out_dir.join("curves_control.csv")).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (t, q, mean) = (col("time"), col("quantity"), col("mean"));
    let survival: Vec<(f64, f64)> = rdr
        .records()
        .map(Result::unwrap)
        .filter(|r| &r[q] == "survival")
        .map(|r| (r[t].parse().unwrap(), r[mean].parse().unwrap()))
        .collect();
    assert_eq!(survival[0], (0.0, 1.0));
    let (t_end, s_end) = survival[survival.len() - 1];
    assert_eq!(t_end, 1.0);
    assert!((s_end - (-2f64).exp()).abs() < 1e-9, "{s_end}");
}

#[test]
fn fit_outputs_feed_back_into_predict() {
    let dir = tempfile::tempdir().unwrap();
    let sim_cfg = write(dir.path(), "sim.toml", "seed = 5\n[simulate]\nn = 150\nhorizon = 4.0\n");
    let sim_dir = dir.path().join("sim");
    let out = survode(&["simulate", "--config", &sim_cfg, "--out", sim_dir.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = sim_dir.join("data.csv");

    let cfg = write(
        dir.path(),
        "fit.toml",
        &LOGISTIC.replace("\"trt\"", "\"x1\"").replace("trt = 0", "x1 = 0").replace("t_max = 1.0", "t_max = 4.0"),
    );
    let fit_dir = dir.path().join("fit");
    let out = survode(
        &["fit", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", fit_dir.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_matrix(&fit_dir.join("samples.csv")).unwrap();
    assert_eq!(header, ["lambda:intercept", "kappa:intercept", "kappa:x1"]);
    assert!(!rows.is_empty() && rows.iter().all(|r| r.iter().all(|v| v.is_finite())));

    let pred_dir = dir.path().join("pred");
    let out = survode(
        &[
            "predict",
            "--config",
            &cfg,
            "--draws",
            fit_dir.join("samples.csv").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            pred_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pred_dir.join("km.csv").exists());

    let cmp_dir = dir.path().join("cmp");
    let fit_toml = fit_dir.join("fit.toml");
    let out = survode(&["compare", "--out", cmp_dir.to_str().unwrap(), fit_toml.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn standardized_columns_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (1..=40).map(|i| format!("{},{},{}\n", 0.1 * i as f64, i % 3 % 2, 50 + i)).collect();
    let data = write(dir.path(), "d.csv", &format!("time,status,age\n{rows}"));
    let cfg = write(
        dir.path(),
        "c.toml",
        "seed = 1\n[model]\nfamily = \"logistic\"\nh0 = \"kappa\"\nstandardize = [\"age\"]\n[model.formulas]\nkappa = [\"age\"]\n",
    );
    let out_dir = dir.path().join("out");
    let out = survode(&["fit", "--config", &cfg, "--data", &data, "--out", out_dir.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: toml::Value = toml::from_str(&std::fs::read_to_string(out_dir.join("fit.toml")).unwrap()).unwrap();
    let scale = &doc["standardized"][0];
    assert_eq!(scale["column"].as_str(), Some("age"));
    assert!((scale["mean"].as_float().unwrap() - 70.5).abs() < 1e-12);
}
