use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn failprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_failprobe")).args(args).output().unwrap()
}

fn in_process(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["failprobe"];
    full.extend_from_slice(args);
    let code = failprobe_cli::run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn group<'a>(report: &'a Value, axis: &str, id: &str) -> &'a Value {
    report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["axis"] == axis)
        .unwrap()["groups"]
        .as_array()
        .unwrap()
        .iter()
        .find(|g| g["group_id"] == id)
        .unwrap()
}

#[test]
fn corpus_report_is_deterministic_and_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("corpus/analyze.toml");
    let mut reports = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("r{run}.json"));
        let table = dir.path().join(format!("r{run}.txt"));
        let (code, _, err) = in_process(&["analyze", "--config", p(&config), "--out", p(&out), "--table", p(&table)]);
        assert_eq!(code, 0, "{err}");
        reports.push((fs::read(&out).unwrap(), fs::read(&table).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0].0, fs::read(fixtures().join("golden/report.json")).unwrap());
    assert_eq!(reports[0].1, fs::read(fixtures().join("golden/report.txt")).unwrap());
}

#[test]
fn corpus_counts_match_hand_tally() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let (code, _, err) = in_process(&["analyze", "--config", p(&fixtures().join("corpus/analyze.toml")), "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    // street_taxi: FD UD; crosswalk: CD CD MD; bus_stop: FD CD; night_stop: MD + FTD
    let p1 = group(&report, "persona", "persona_1");
    assert_eq!(p1["mode_counts"], serde_json::json!({"CD": 3, "FD": 2, "MD": 2, "UD": 1}));
    assert_eq!(p1["warning_counts"]["FTD"], 1);
    // park_path: CD CD FD UD; dog_walk: CD CD; rotated_bike: FD
    let p2 = group(&report, "persona", "persona_2");
    assert_eq!(p2["mode_counts"], serde_json::json!({"CD": 4, "FD": 2, "MD": 0, "UD": 1}));
    assert_eq!(p2["dist_counts"], serde_json::json!({"ID": 5, "OOD": 1}));
    let model = group(&report, "model", "coco80");
    assert_eq!(model["totals"]["instances"], 15);
}

#[test]
fn taxi_pair_reports_fd_ud_and_all_ood() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("taxi.json");
    let taxi = fixtures().join("taxi");
    let output = failprobe(&[
        "analyze",
        "--annotations",
        p(&taxi.join("annotations.json")),
        "--predictions",
        p(&taxi.join("predictions.json")),
        "--out",
        p(&out),
    ]);
    assert_eq!(output.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let g = group(&report, "model", "coco80");
    assert_eq!(g["mode_counts"], serde_json::json!({"CD": 0, "FD": 1, "MD": 0, "UD": 1}));
    assert_eq!(g["dist_percent"]["OOD"], 100.0);
    let table = String::from_utf8(output.stdout).unwrap();
    assert!(table.contains("1 (50.0%)"));
    assert!(table.contains("1 (100.0%)"));
}

#[test]
fn empty_predictions_give_ftd_and_missing_detections() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("empty.json");
    fs::write(&preds, r#"{"format_version": 1, "predictions": []}"#).unwrap();
    let out = dir.path().join("r.json");
    let (code, _, err) = in_process(&[
        "analyze",
        "--annotations",
        p(&fixtures().join("corpus/annotations.json")),
        "--predictions",
        p(&preds),
        "--out",
        p(&out),
        "--axis",
        "model",
    ]);
    assert_eq!(code, 0);
    assert!(err.contains("zero detections"));
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let g = group(&report, "model", "coco80");
    assert_eq!(g["mode_percent"]["MD"], 100.0);
    assert_eq!(g["warning_counts"]["FTD"], 7);
    for image in report["images"].as_array().unwrap() {
        assert_eq!(image["image_warnings"], serde_json::json!(["FTD"]));
    }
}

#[test]
fn malformed_annotations_exit_with_parse_code_and_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"scenarios": [{"scenario_id": "s"}]"#).unwrap();
    let out = dir.path().join("r.json");
    let output = failprobe(&[
        "analyze",
        "--annotations",
        p(&bad),
        "--predictions",
        p(&fixtures().join("taxi/predictions.json")),
        "--out",
        p(&out),
    ]);
    assert_eq!(output.status.code(), Some(failprobe_cli::EXIT_INPUT));
    assert!(!out.exists());

    let inverted = dir.path().join("inv.json");
    fs::write(
        &inverted,
        r#"{"scenarios":[{"scenario_id":"s","persona_id":"p","image_ids":["i"]}],
            "annotations":[{"id":"a","image_id":"i","label":"car","box":{"x_min":0.5,"y_min":0.1,"x_max":0.2,"y_max":0.4}}]}"#,
    )
    .unwrap();
    let (code, _, _) = in_process(&["analyze", "--annotations", p(&inverted), "--predictions", p(&fixtures().join("taxi/predictions.json"))]);
    assert_eq!(code, failprobe_cli::EXIT_INPUT);
}

#[test]
fn missing_input_file_is_an_io_error() {
    let (code, _, _) = in_process(&["analyze", "--annotations", "/nonexistent/a.json", "--predictions", "/nonexistent/p.json"]);
    assert_eq!(code, failprobe_cli::EXIT_IO);
}

#[test]
fn unreachable_remote_model_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("street.png");
    let img = image::RgbaImage::from_pixel(8, 6, image::Rgba([10, 20, 30, 255]));
    img.save(&png).unwrap();
    fs::write(
        dir.path().join("annotations.json"),
        r#"{"scenarios":[{"scenario_id":"s","persona_id":"p","image_ids":["street"]}],
            "images":[{"image_id":"street","file":"street.png"}],
            "annotations":[]}"#,
    )
    .unwrap();
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    fs::write(
        dir.path().join("model.json"),
        format!(
            r#"{{"model_id":"hosted","display_name":"hosted","backend_kind":"remote","endpoint":"http://127.0.0.1:{port}/detect","class_list":["car"]}}"#
        ),
    )
    .unwrap();
    let out = dir.path().join("r.json");
    let (code, _, err) = in_process(&[
        "analyze",
        "--annotations",
        p(&dir.path().join("annotations.json")),
        "--model",
        p(&dir.path().join("model.json")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, failprobe_cli::EXIT_BACKEND, "{err}");
    assert!(!out.exists());
}

#[test]
fn mock_model_live_run() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("street.png");
    image::RgbaImage::from_pixel(200, 400, image::Rgba([1, 2, 3, 255])).save(&png).unwrap();
    let hash = failprobe_core::explore::external::sha256_hex(&fs::read(&png).unwrap());
    fs::write(
        dir.path().join("fixtures.json"),
        format!(r#"{{"format_version":1,"fixtures":{{"{hash}":[{{"label":"car","score":0.98,"box":{{"xmin":10,"ymin":20,"xmax":110,"ymax":220}}}}]}}}}"#),
    )
    .unwrap();
    fs::write(
        dir.path().join("model.json"),
        r#"{"model_id":"mock","display_name":"mock","backend_kind":"mock","fixture":"fixtures.json","class_list":["car"]}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("annotations.json"),
        r#"{"scenarios":[{"scenario_id":"s","persona_id":"p","image_ids":["street"]}],
            "images":[{"image_id":"street","file":"street.png"}],
            "annotations":[{"id":"a","image_id":"street","label":"car","box":{"x_min":0.05,"y_min":0.05,"x_max":0.55,"y_max":0.55}}]}"#,
    )
    .unwrap();
    let out = dir.path().join("r.json");
    let (code, _, err) = in_process(&[
        "analyze",
        "--annotations",
        p(&dir.path().join("annotations.json")),
        "--model",
        p(&dir.path().join("model.json")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["model_id"], "mock");
    assert_eq!(report["images"][0]["instances"][0]["mode"], "CD");
    assert_eq!(report["images"][0]["instances"][0]["pair_iou"], 1.0);
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let (code, _, _) = in_process(&[
        "analyze",
        "--config",
        p(&fixtures().join("corpus/analyze.toml")),
        "--out",
        p(&out),
        "--axis",
        "scenario",
        "--confidence-floor",
        "0.5",
    ]);
    assert_eq!(code, 0);
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["metrics"].as_array().unwrap().len(), 1);
    assert_eq!(report["thresholds"]["confidence_floor"], 0.5);
}

#[test]
fn out_of_range_weight_is_rejected() {
    let (code, _, err) = in_process(&["analyze", "--config", p(&fixtures().join("corpus/analyze.toml")), "--gamma-class", "1.5"]);
    assert_eq!(code, failprobe_cli::EXIT_INPUT);
    assert!(err.contains("gamma_class"));
}

#[test]
fn catalog_observation_rows() {
    let output = failprobe(&["catalog", "list", "--level", "observation"]);
    assert_eq!(output.status.code(), Some(0));
    let text = String::from_utf8(output.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.starts_with("observation\t")));
    let (_, all, _) = in_process(&["catalog", "list"]);
    assert_eq!(all.lines().count(), 13);
    let (_, rec, _) = in_process(&["catalog", "list", "--recovery"]);
    assert_eq!(rec.lines().count(), 8);
    assert!(rec.starts_with("Quality of output"));
    let (code, _, _) = in_process(&["catalog", "list", "--level", "cosmic"]);
    assert_eq!(code, failprobe_cli::EXIT_USAGE);
}

#[test]
fn project_init_validate_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let proj = dir.path().join("proj");
    let (code, _, _) = in_process(&["project", "init", p(&proj), "--id", "demo"]);
    assert_eq!(code, 0);
    let (code, out, _) = in_process(&["project", "validate", p(&proj)]);
    assert_eq!(code, 0, "{out}");
    let (code, board, _) = in_process(&["export-board", p(&proj)]);
    assert_eq!(code, 0);
    let board: Value = serde_json::from_str(&board).unwrap();
    assert_eq!(board["groups"], serde_json::json!([]));
    assert_eq!(board["project_id"], "demo");

    let (code, _, _) = in_process(&["project", "init", p(&proj)]);
    assert_eq!(code, failprobe_cli::EXIT_IO);

    let manifest = proj.join("project.json");
    let mut doc: Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    doc["scenarios"] = serde_json::json!([{"scenario_id": "s1", "persona_id": "ghost", "description": "", "image_ids": []}]);
    fs::write(&manifest, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    let (code, _, err) = in_process(&["project", "validate", p(&proj)]);
    assert_eq!(code, failprobe_cli::EXIT_INVALID_PROJECT);
    assert!(err.contains("ghost"));
}

#[test]
fn augment_identity_and_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.png");
    image::RgbaImage::from_fn(4, 2, |x, y| image::Rgba([x as u8 * 40, y as u8 * 90, 7, 255])).save(&src).unwrap();
    let same = dir.path().join("same.png");
    let output = failprobe(&["augment", "--input", p(&src), "--output", p(&same), "--kind", "rotation", "--param", "0"]);
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(fs::read(&same).unwrap(), fs::read(&src).unwrap());

    let turned = dir.path().join("turned.png");
    let (code, _, _) = in_process(&["augment", "--input", p(&src), "--output", p(&turned), "--kind", "rotation", "--param", "90"]);
    assert_eq!(code, 0);
    assert_eq!(image::image_dimensions(&turned).unwrap(), (2, 4));

    let (code, _, _) = in_process(&["augment", "--input", p(&src), "--output", p(&turned), "--kind", "crop", "--param", "1.5"]);
    assert_eq!(code, failprobe_cli::EXIT_INPUT);
}

#[test]
fn help_documents_exit_codes() {
    let (code, out, _) = in_process(&["analyze", "--help"]);
    assert_eq!(code, 0);
    for needle in ["Exit codes", "3  input", "4  detector backend", "5  file system"] {
        assert!(out.contains(needle), "{needle}");
    }
}
