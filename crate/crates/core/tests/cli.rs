use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use carfollow::evaluation::Predictor;
use carfollow::io::{read_features_csv, read_model, read_report_csv};
use carfollow::{AccelBounds, FittedModel};
use tempfile::TempDir;

fn carfollow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carfollow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = carfollow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, drivers: &str, events: &str) {
    ok(&["generate", "--output", s(dir), "--drivers", drivers, "--events", events, "--duration", "60", "--seed", "3"]);
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let out = carfollow(&["sweep", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(carfollow(&["--help"]).status.code(), Some(0));
}

#[test]
fn fit_then_predict_matches_in_process_predictions() {
    let tmp = TempDir::new().unwrap();
    let (data, feats) = (tmp.path().join("corpus"), tmp.path().join("z2.csv"));
    corpus(&data, "1", "3");
    ok(&["extract", "--input", s(&data), "--output", s(&feats), "--feature-set", "z2"]);
    for method in ["gmm-hmm", "gmm-pdf"] {
        let model = tmp.path().join(format!("{method}.json"));
        let pred = tmp.path().join(format!("{method}.csv"));
        ok(&["fit", "--input", s(&feats), "--output", s(&model), "--components", "3", "--method", method]);
        ok(&["predict", "--model", s(&model), "--input", s(&feats), "--output", s(&pred)]);

        let model = read_model(&model).unwrap();
        let (_, events) = read_features_csv(&feats, Some(model.feature_set())).unwrap();
        let predictor = match model {
            FittedModel::GmmHmm(p) => Predictor::Hmm(carfollow::hmm::HmmRegressor::new(p).unwrap()),
            FittedModel::GmmPdf(g) => Predictor::Pdf(carfollow::pdf::PdfRegressor::new(&g, AccelBounds::default()).unwrap()),
        };
        let expected: Vec<f64> = events
            .iter()
            .flat_map(|e| predictor.predict_sequence(&e.observations).unwrap())
            .collect();
        let mut r = csv::Reader::from_path(&pred).unwrap();
        let got: Vec<f64> = r
            .records()
            .map(|rec| rec.unwrap()[3].parse().unwrap())
            .collect();
        assert_eq!(got, expected, "{method}");
    }
}

#[test]
fn unfittable_data_exits_two() {
    let tmp = TempDir::new().unwrap();
    let feats = tmp.path().join("huge.csv");
    let mut text = String::from("event_id,t,dx,dv,dvdot,jerk,v_h,a\n");
    for k in 0..50 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        text += &format!("e,{},{},{},,,,{}\n", k as f64 * 0.1, sign * 1e200, -sign * 1e200, sign * 1e200);
    }
    fs::write(&feats, text).unwrap();
    let out = carfollow(&["fit", "--input", s(&feats), "--output", s(&tmp.path().join("m.json")), "--components", "2", "--method", "gmm-hmm"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("corpus");
    corpus(&data, "2", "4");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "evaluate", "--input", s(&data), "--output", s(&out), "--feature-set", "z3", "--components", "4",
            "--method", "gmm-hmm", "--m-groups", "4", "--repeats", "3", "--seed", "17",
        ]);
        (fs::read(out.join("report.csv")).unwrap(), fs::read(out.join("summary.json")).unwrap())
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(read_report_csv(&tmp.path().join("a/report.csv")).unwrap().len(), 2);
}

#[test]
fn sweep_output_is_independent_of_jobs_and_compare_reads_it() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("corpus");
    corpus(&data, "2", "3");
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"feature_sets":["Z1","Z2"],"component_counts":[2,5],"repeats":2,"m_groups":3}"#).unwrap();
    let run = |name: &str, jobs: &str| {
        let out = tmp.path().join(name);
        ok(&["sweep", "--input", s(&data), "--output", s(&out), "--config", s(&cfg), "--jobs", jobs]);
        (fs::read(out.join("report.csv")).unwrap(), fs::read(out.join("summary.json")).unwrap())
    };
    let serial = run("serial", "1");
    assert_eq!(serial, run("parallel", "3"));
    assert_eq!(read_report_csv(&tmp.path().join("serial/report.csv")).unwrap().len(), 2 * 2 * 2 * 2);

    let cmp = tmp.path().join("cmp.json");
    ok(&["compare", "--input", s(&tmp.path().join("serial/report.csv")), "--output", s(&cmp)]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(&cmp).unwrap()).unwrap();
    assert_eq!(summary["cells"].as_array().unwrap().len(), 2 * 2 * 2);
}
