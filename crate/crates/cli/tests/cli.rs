//! End-to-end runs of the `blp-ife` binary on the bundled synthetic panel.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blp_ife::commands::{fit, prepare};
use blp_ife::config::RunConfig;
use blp_ife::panel_io::{load_panel_csv, Schema};
use blp_ife_core::dgp::{generate, SimulationDesign};
use blp_ife_core::lsmd::EstimatorOptions;
use serde_json::Value;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn conf() -> PathBuf {
    data_dir().join("example.conf")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blp-ife"))
        .args(args)
        .env_remove("BLP_IFE_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-12)
}

#[test]
fn bundled_panel_is_the_documented_draw() {
    let sim = generate(&SimulationDesign::with_size(15, 12), 7).unwrap();
    let schema = Schema {
        regressors: vec!["price".into()],
        instruments: vec!["price_sq".into()],
        ..Schema::default()
    };
    let loaded = load_panel_csv(data_dir().join("example.csv"), &schema).unwrap();
    let expected = sim.data.with_names(vec!["price".into()], vec!["price_sq".into()]).unwrap();
    assert_eq!(loaded, expected);
}

#[test]
fn estimate_writes_all_artifacts_and_matches_goldens() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["estimate", "--config", conf().to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["estimate.json", "inference.json", "spectrum.csv", "loadings.csv", "factors.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let doc = json(&dir.path().join("estimate.json"));
    let p = &doc["parameters"];
    // frozen from this dataset; the library cross-check below pins them to
    // the estimator itself
    let golden = [
        ("sigma_price", 1.154798448884917, 1.1443371226926669, 0.09012937038330507),
        ("price", -3.176223740422023, -3.156177144011193, 0.12141052905333484),
    ];
    for (i, (name, est, corr, se)) in golden.iter().enumerate() {
        assert_eq!(p[i]["name"], *name);
        assert!(close(p[i]["estimate"].as_f64().unwrap(), *est, 1e-6));
        assert!(close(p[i]["corrected"].as_f64().unwrap(), *corr, 1e-6));
        assert!(close(p[i]["se"].as_f64().unwrap(), *se, 1e-6));
    }
    assert_eq!(doc["estimate"]["weight"]["kind"], "optimal");
    assert_eq!(doc["settings"]["bandwidth"], 2);
    assert_eq!(doc["settings"]["estimator"]["inner"]["starts"], 5);
    assert!(doc["first_stage"].is_object());

    // the command is a thin layer over the library
    let mut cfg = RunConfig::default();
    cfg.apply(&RunConfig::load(&conf()).unwrap()).unwrap();
    let prepared = prepare(&cfg).unwrap();
    let (est, _) = fit(&cfg, &prepared, &EstimatorOptions::default()).unwrap();
    assert_eq!(est.alpha[0], p[0]["estimate"].as_f64().unwrap());
    assert_eq!(est.beta[0], p[1]["estimate"].as_f64().unwrap());

    let inf = json(&dir.path().join("inference.json"));
    assert_eq!(inf["parameters"][1], "price");
    assert_eq!(inf["covariance"].as_array().unwrap().len(), 2);
    let spectrum = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().count(), 1 + 12);
}

#[test]
fn missing_column_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "estimate",
        "--config",
        conf().to_str().unwrap(),
        "--set",
        "regressors=price,quality",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing column 'quality'"), "{}", stderr(&o));
}

#[test]
fn too_many_factors_is_a_dimension_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["estimate", "--config", conf().to_str().unwrap(), "--factors", "12", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dimension error"), "{}", stderr(&o));
}

#[test]
fn estimation_requires_alpha_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_dir().join("example.csv");
    let o = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--set",
        "regressors=price",
        "--set",
        "instruments=price_sq",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha_bounds"), "{}", stderr(&o));
}

#[test]
fn boundary_solution_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "estimate",
        "--config",
        conf().to_str().unwrap(),
        "--alpha-bounds",
        "0,0.5",
        "--weight",
        "identity",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("boundary"));
    let doc = json(&dir.path().join("estimate.json"));
    assert_eq!(doc["estimate"]["boundary"], true);
    assert!((doc["estimate"]["alpha"][0].as_f64().unwrap() - 0.5).abs() < 1e-4);
}

#[test]
fn weight_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.csv");
    std::fs::write(&w, "3.0\n").unwrap();
    let out = dir.path().join("out");
    let weight = format!("file:{}", w.display());
    let o = run(&["estimate", "--config", conf().to_str().unwrap(), "--weight", &weight, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&out.join("estimate.json"));
    assert_eq!(doc["estimate"]["weight"]["kind"], "user");
    // exactly identified: the weight does not move the estimate
    assert!(close(doc["estimate"]["alpha"][0].as_f64().unwrap(), 1.154798448884917, 1e-6));

    std::fs::write(&w, "1,0\n0,1\n").unwrap();
    let o = run(&["estimate", "--config", conf().to_str().unwrap(), "--weight", &weight, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("instruments"), "{}", stderr(&o));
}

fn simulate(out: &Path, reps: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "simulate",
        "--set",
        "products=8",
        "--set",
        "markets=8",
        "--reps",
        reps,
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn simulate_is_reproducible_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = simulate(&a, "3", &["--threads", "1"]);
    let ob = simulate(&b, "3", &["--threads", "3"]);
    assert_eq!(oa.status.code(), Some(0), "{}", stderr(&oa));
    assert_eq!(ob.status.code(), Some(0), "{}", stderr(&ob));
    for f in ["summary.csv", "reps.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    // settings echo the output directory and thread count; results must not
    // depend on either
    let (mut ja, mut jb) = (json(&a.join("study.json")), json(&b.join("study.json")));
    assert_eq!(ja["settings"]["threads"], 1);
    ja["settings"] = Value::Null;
    jb["settings"] = Value::Null;
    assert_eq!(ja, jb);
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("estimator,parameter,truth,mean,bias,std,rmse,mean_se,size"));
    assert_eq!(summary.lines().count(), 1 + 2 + 2);
}

#[test]
fn single_replication_gives_one_logged_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), "1", &["--set", "inference=false"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reps = std::fs::read_to_string(dir.path().join("reps.csv")).unwrap();
    assert_eq!(reps.lines().count(), 2);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn threads_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_blp-ife"))
        .args(["simulate", "--reps", "1", "--set", "products=6", "--set", "markets=6", "--out"])
        .arg(dir.path())
        .env("BLP_IFE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("BLP_IFE_THREADS"));
}

#[test]
fn diagnose_simulated_demand_panel() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "diagnose",
        "--set",
        "products=12",
        "--set",
        "markets=12",
        "--set",
        "grid_points=5",
        "--factors",
        "1",
        "--threads",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let surface = std::fs::read_to_string(dir.path().join("surface.csv")).unwrap();
    let mut lines = surface.lines();
    assert_eq!(lines.next(), Some("alpha,beta,rho_iv,rho_f,delta_rho"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 25);
    for r in rows.iter().filter(|r| r[2].is_finite()) {
        assert!((-1e-10..=1.0 + 1e-10).contains(&r[2]) && (-1e-10..=1.0 + 1e-10).contains(&r[3]));
        assert!((r[4] - (r[2] - r[3])).abs() < 1e-12);
    }
    // the grid is centred on the truth, where the ratios are undefined
    let doc = json(&dir.path().join("diagnose.json"));
    assert_eq!(doc["surface"]["degenerate_points"], 1);
    assert!(dir.path().join("profile.csv").exists());
}

#[test]
fn diagnose_bimodal_profile() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "diagnose",
        "--set",
        "design=bimodal",
        "--set",
        "products=100",
        "--set",
        "markets=100",
        "--set",
        "grid_points=81",
        "--seed",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&dir.path().join("diagnose.json"));
    let minima: Vec<f64> = doc["profile"]["local_minima"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(minima.iter().any(|m| m.abs() < 0.1), "{minima:?}");
    assert!(minima.iter().any(|m| (0.6..=1.0).contains(m)), "{minima:?}");
    assert!(doc["profile"]["inner_ls_beta"].as_f64().unwrap().abs() < 0.1);
}

#[test]
fn diagnose_on_data_uses_the_estimate_as_reference() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "diagnose",
        "--config",
        conf().to_str().unwrap(),
        "--set",
        "grid_points=3",
        "--weight",
        "identity",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&dir.path().join("diagnose.json"));
    assert_eq!(doc["reference"]["kind"], "estimate");
    assert!(close(doc["reference"]["alpha"][0].as_f64().unwrap(), 1.154798448884917, 1e-6));
}

#[test]
fn elasticity_matrix_for_one_market() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "elasticity",
        "--config",
        conf().to_str().unwrap(),
        "--set",
        "market=m03",
        "--weight",
        "identity",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("elasticities_m03.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 16);
    assert_eq!(header[1], "p01");
    for (j, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], format!("p{:02}", j + 1));
        let own: f64 = cells[j + 1].parse().unwrap();
        assert!(own < 0.0);
        for (k, c) in cells[1..].iter().enumerate() {
            let v: f64 = c.parse().unwrap();
            assert!(v.is_finite() && (k == j || v >= 0.0));
        }
    }
    let o = run(&["elasticity", "--config", conf().to_str().unwrap(), "--set", "market=nowhere", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_setting_is_rejected_before_any_work() {
    let o = run(&["simulate", "--set", "repz=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown setting 'repz'"));
}
