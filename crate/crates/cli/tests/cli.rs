use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use purerisk::jackknife::derive_seed;
use purerisk::model::FittedModel;
use purerisk::pipeline::run_pipeline;
use purerisk::sim::{generate_population, replicate_inputs, Participation, SimulationConfig};

fn purerisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_purerisk")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn export(dir: &Path, seed: &str) -> Output {
    let out = purerisk(&[
        "simulate", "--scenario", "1", "--sims", "1", "--no-jackknife", "--export-samples", "--seed", seed,
        "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn simulate_smoke_run_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    export(dir.path(), "1");
    assert!(start.elapsed() < Duration::from_secs(60));
    for f in ["resolved_config.json", "metrics.csv", "metrics.txt", "replicates.csv", "truth.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    // 4 methods x 6 estimands plus the header
    assert_eq!(metrics.lines().count(), 25);
}

#[test]
fn fit_reproduces_in_process_pipeline_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    export(d, "7");
    let fit_dir = d.join("fit");
    let out = purerisk(&[
        "fit", "--cohort", &path(d, "cohort.csv"), "--survey", &path(d, "survey.csv"), "--registry",
        &path(d, "registry.json"), "--config", &path(d, "fit_config.json"), "--out", fit_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(fit_dir.join("model.json")).unwrap();
    let model: FittedModel = serde_json::from_str(&text).unwrap();

    let cfg = SimulationConfig::preset(1, Participation::Noninformative, 1, 7).unwrap();
    let pop = generate_population(&cfg.scenario, derive_seed(7, 0)).unwrap();
    let (cohort, survey, pipeline) = replicate_inputs(&pop, &cfg, 0).unwrap();
    let expected = run_pipeline(&cohort, &survey, Some(&pop.registry), &pipeline).unwrap();

    assert_eq!(model.output.methods.len(), expected.methods.len());
    for (got, want) in model.output.methods.iter().zip(&expected.methods) {
        assert_eq!(got.method, want.method);
        assert_eq!(got.fit, want.fit, "{}", want.method);
        assert_eq!(got.hazard, want.hazard, "{}", want.method);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got.fit.beta), bits(&want.fit.beta));
    }
    assert!(fit_dir.join("hazards.csv").exists());
    assert!(fit_dir.join("imputation_audit.csv").exists());
}

#[test]
fn risk_table_starts_at_zero_and_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    export(d, "3");
    let fit_dir = d.join("fit");
    let out = purerisk(&[
        "fit", "--cohort", &path(d, "cohort.csv"), "--survey", &path(d, "survey.csv"), "--registry",
        &path(d, "registry.json"), "--carry-forward", "--propensity", "z1,z2", "--methods", "naive,cipw",
        "--out", fit_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model: FittedModel = serde_json::from_str(&std::fs::read_to_string(fit_dir.join("model.json")).unwrap()).unwrap();
    assert!(!model.replicates.is_empty());

    let out = purerisk(&["risk", "--model", fit_dir.to_str().unwrap(), "--profile", "1,-0.5,0", "--times", "0,2,5,10,15"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 10);
    for block in rows.chunks(5) {
        let method = &block[0][0];
        let risks: Vec<f64> = block.iter().map(|r| r[2].parse().unwrap()).collect();
        assert_eq!(risks[0], 0.0);
        assert_eq!((&block[0][4], &block[0][5]), ("0", "0"));
        assert!(risks.windows(2).all(|w| w[1] >= w[0]));
        let m = model.output.methods.iter().find(|m| m.method.name() == method).unwrap();
        for (r, t) in block.iter().zip([0.0, 2.0, 5.0, 10.0, 15.0]) {
            let want = m.pure_risk(&[1.0, -0.5, 0.0], t).unwrap();
            assert_eq!(r[2].parse::<f64>().unwrap(), want);
            let (lo, hi): (f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap());
            assert!(lo <= want && want <= hi);
        }
    }
}

#[test]
fn survey_incidence_columns_are_ignored_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    export(d, "5");
    // the cohort file has incidence columns; use it as the survey too
    let out = purerisk(&[
        "fit", "--cohort", &path(d, "cohort.csv"), "--survey", &path(d, "cohort.csv"), "--registry",
        &path(d, "registry.json"), "--no-jackknife", "--carry-forward", "--methods", "naive,ipw",
        "--out", &path(d, "fit"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ignored"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&purerisk(&["simulate", "--scenario", "4", "--out", &path(d, "x")])), 2);
    assert_eq!(code(&purerisk(&["frobnicate"])), 2);

    export(d, "2");
    // PAR baseline without a registry
    let out = purerisk(&["fit", "--cohort", &path(d, "cohort.csv"), "--survey", &path(d, "survey.csv")]);
    assert_eq!(code(&out), 2);

    std::fs::write(d.join("bad.csv"), "id,z1,z2,z3,Dtilde,Xtilde\na,0,0,0,2,1\n").unwrap();
    let out = purerisk(&[
        "fit", "--cohort", &path(d, "cohort.csv"), "--survey", &path(d, "bad.csv"), "--registry",
        &path(d, "registry.json"), "--out", &path(d, "f"),
    ]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 1") && err.contains("Dtilde"), "{err}");

    let out = purerisk(&[
        "fit", "--cohort", &path(d, "cohort.csv"), "--survey", &path(d, "survey.csv"), "--registry",
        &path(d, "registry.json"), "--no-jackknife", "--out", &path(d, "f"),
    ]);
    // the cohort risk set runs out just before t_max
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    let out = purerisk(&[
        "fit", "--cohort", &path(d, "cohort.csv"), "--survey", &path(d, "survey.csv"), "--registry",
        &path(d, "registry.json"), "--no-jackknife", "--carry-forward", "--out", &path(d, "f"),
    ]);
    assert_eq!(code(&out), 0);
    let out = purerisk(&["risk", "--model", &path(d, "f"), "--profile", "0,0", "--times", "1"]);
    assert_eq!(code(&out), 3);
}
