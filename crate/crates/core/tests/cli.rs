use std::path::Path;

use cdrca::cli::{run_cli, RunManifest};
use serde_json::Value;

fn cli(dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["cdrca".to_string()];
    for a in args {
        // Bare file names refer to the scratch directory.
        let joined = dir.join(a);
        let is_file = a.contains('.') && !a.contains(',') && !a.contains(':') && a.parse::<f64>().is_err();
        argv.push(if is_file { joined.to_string_lossy().into_owned() } else { a.to_string() });
    }
    run_cli(argv)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_generate_discover_fit_attribute_finds_x1() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(
        cli(d, &["generate", "--model", "illustrative", "--length", "5000", "--seed", "7", "--with-errors", "--horizon", "3", "--out", "train.csv"]),
        0
    );
    assert_eq!(
        cli(d, &["inject", "--model", "illustrative", "--length", "600", "--seed", "8", "--inject", "X1:20@500", "--predictor", "train.predictor.json", "--out", "test.csv"]),
        0
    );
    assert_eq!(cli(d, &["discover", "--data", "train.csv", "--roles", "train.sidecar.json", "--tau-max", "3", "--out", "graph.json"]), 0);
    assert_eq!(cli(d, &["validate-graph", "--graph", "graph.json"]), 0);
    assert_eq!(cli(d, &["fit", "--data", "train.csv", "--roles", "train.sidecar.json", "--graph", "graph.json", "--out", "scm.json"]), 0);
    assert_eq!(
        cli(
            d,
            &[
                "attribute", "--scm", "scm.json", "--data", "test.csv", "--roles", "test.sidecar.json", "--reference", "train.csv", "--time",
                "502", "--samples", "2000", "--seed", "1", "--out", "report.json",
            ]
        ),
        0
    );
    let report = read_json(&d.join("report.json"));
    assert_eq!(report["time_label"], "502");
    let phi_of = |name: &str| {
        report["variables"].as_array().unwrap().iter().find(|v| v["name"] == name).unwrap()["phi"].as_f64().unwrap()
    };
    let best = ["X1", "X2", "X3"].into_iter().max_by(|a, b| phi_of(a).total_cmp(&phi_of(b))).unwrap();
    assert_eq!(best, "X1", "{report}");

    let m: RunManifest = serde_json::from_value(read_json(&d.join("report.manifest.json"))).unwrap();
    assert_eq!(m.subcommand, "attribute");
    assert_eq!(m.status, "ok");
    assert_eq!(m.seed, Some(1));
    assert!(m.finished_unix.is_some());

    assert_eq!(cli(d, &["baseline", "--data", "test.csv", "--roles", "test.sidecar.json", "--time", "502", "--out", "base.json"]), 0);
    assert_eq!(read_json(&d.join("base.json"))["method"], "zscore");
}

#[test]
fn attribute_without_error_column_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(cli(d, &["generate", "--model", "illustrative", "--length", "1000", "--seed", "3", "--out", "plain.csv"]), 0);
    assert_eq!(cli(d, &["discover", "--data", "plain.csv", "--covariates", "X1,X2,X3", "--target", "Y", "--out", "g.json"]), 0);
    assert_eq!(cli(d, &["fit", "--data", "plain.csv", "--covariates", "X1,X2,X3", "--target", "Y", "--graph", "g.json", "--out", "s.json"]), 0);
    let code = cli(d, &["attribute", "--scm", "s.json", "--data", "plain.csv", "--roles", "plain.sidecar.json", "--time", "900", "--seed", "1", "--out", "r.json"]);
    assert_eq!(code, 1);
    assert!(!d.join("r.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(cli(d, &["generate", "--model", "illustrative", "--length", "1000", "--out", "x.csv"]), 2, "missing seed");
    assert_eq!(cli(d, &["generate", "--model", "nope", "--length", "1000", "--seed", "1", "--out", "x.csv"]), 2);
    assert_eq!(cli(d, &["experiment", "--scenario", "grid-f9", "--seed", "1", "--out", "dir"]), 2);
    assert_eq!(cli(d, &["experiment", "--scenario", "table1", "--paper-scale", "--desk-scale", "--seed", "1", "--out", "dir"]), 2);
    assert_eq!(cli(d, &["discover", "--data", "missing.csv", "--target", "Y", "--out", "g.json"]), 2, "incomplete role flags");
}

#[test]
fn identical_argv_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for name in ["a.csv", "b.csv"] {
        assert_eq!(cli(d, &["generate", "--model", "f1a", "--beta", "1.5", "--inject", "X1:3@400", "--length", "600", "--seed", "5", "--out", name]), 0);
    }
    assert_eq!(std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("b.csv")).unwrap());
    let side = read_json(&d.join("a.sidecar.json"));
    assert_eq!(side["scenario"]["beta"], 1.5);
    assert_eq!(side["scenario"]["injection"]["variable"], "X1");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), "seed = 99\n\n[generate]\nmodel = \"f1\"\nlength = 300\n").unwrap();
    assert_eq!(cli(d, &["--config", "run.toml", "generate", "--length", "150", "--out", "c.csv"]), 0);
    let side = read_json(&d.join("c.sidecar.json"));
    assert_eq!(side["scenario"]["seed"], 99);
    assert_eq!(side["scenario"]["length"], 150);
    assert_eq!(side["scenario"]["model"], "f1");
}

#[test]
fn graph_tools() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let g = cdrca::synthgen::true_graph(cdrca::synthgen::ModelKind::Sim2Train, 0).unwrap();
    g.write_json(d.join("g.json")).unwrap();
    assert_eq!(cli(d, &["perturb-graph", "--graph", "g.json", "--k", "2", "--seed", "4", "--out", "p.json"]), 0);
    let p = cdrca::CausalGraph::read_json(d.join("p.json")).unwrap();
    assert_eq!(p.n_edges(), g.n_edges() + 2);
    assert_eq!(cli(d, &["validate-graph", "--graph", "p.json", "--out", "v.json"]), 0);
    assert_eq!(read_json(&d.join("v.json"))["valid"], true);

    // A back-in-time edge is reported and fails validation.
    let mut text = read_json(&d.join("g.json"));
    text["edges"].as_array_mut().unwrap().push(serde_json::json!({"from": ["X4", 0], "to": ["X1", 0]}));
    std::fs::write(d.join("bad.json"), text.to_string()).unwrap();
    assert_eq!(cli(d, &["validate-graph", "--graph", "bad.json", "--out", "vb.json"]), 1);
    assert_eq!(read_json(&d.join("vb.json"))["valid"], false);
}

#[test]
fn ate_table_for_known_model() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(cli(d, &["ate", "--model", "f2", "--method", "path", "--out", "ate.csv"]), 0);
    let csv = std::fs::read_to_string(d.join("ate.csv")).unwrap();
    assert!(csv.starts_with("source,target,method,value"));
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(cli(d, &["ate", "--model", "f1", "--source", "X2@1", "--method", "both", "--samples", "500", "--seed", "2", "--out", "one.json"]), 0);
    let rows = read_json(&d.join("one.json"));
    let a = rows[0]["value"].as_f64().unwrap();
    let b = rows[1]["value"].as_f64().unwrap();
    assert!((a - b).abs() < 1e-9 && (a - 0.8).abs() < 1e-12, "{a} {b}");
}
