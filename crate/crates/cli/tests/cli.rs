use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_fieldscale");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env_remove("FIELDSCALE_WORKERS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(dir: &Path, args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = run(dir, &full);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json stdout")
}

fn synth(dir: &Path) {
    json(dir, &["synth", "--seed", "3", "--height", "96", "--width", "112", "--fields", "8", "--out", "w"]);
}

#[test]
fn seasons_prints_both_windows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["seasons", "--lat", "48"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "planting (91, 151)\nharvest (244, 304)\n");
    let v = json(dir.path(), &["seasons", "--lat", "-30"]);
    assert_eq!(v["harvest"]["start_doy"], 32);
    assert_eq!(v["harvest"]["end_doy"], 120);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["seasons", "--lat", "120"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["stitch", "--input", "missing", "--out", "x"]).status.code(), Some(1));
    synth(dir.path());
    let bad = run(dir.path(), &["stitch", "--input", "w/bands", "--out", "z", "--overlap", "0.9"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = run(dir.path(), &["stitch", "--input", "w/bands", "--out", "z", "--model", "unet"]);
    assert_eq!(bad.status.code(), Some(2));
    let failing = run(dir.path(), &["loss-check", "--seeds", "1", "--tol", "0"]);
    assert_eq!(failing.status.code(), Some(1));
}

#[test]
fn oracle_pipeline_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    for f in ["w/bands.bin", "w/bands.json", "w/gt_mask.bin", "w/gt_ids.json", "w/gt.geojson"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let st = json(d, &["stitch", "--input", "w/bands", "--out", "logits", "--patch-size", "64", "--report", "st.json"]);
    assert!(st["throughput"]["area_km2"].as_f64().unwrap() > 0.0);
    json(d, &["extract", "--logits", "logits", "--out", "pred.geojson", "--block-size", "16", "--ids-out", "ids"]);

    let geo: Value = serde_json::from_slice(&std::fs::read(d.join("pred.geojson")).unwrap()).unwrap();
    let feature = &geo["features"][0];
    assert_eq!(feature["properties"]["determination_method"], "auto-imagery");
    assert!(feature["properties"]["area_ha"].as_f64().unwrap() > 0.0);

    for pred in ["pred.geojson", "logits"] {
        let ev = json(d, &["evaluate", "--pred", pred, "--gt", "w/gt_mask", "--stitch-report", "st.json"]);
        assert_eq!(ev["pixel"]["interior"]["iou"], 1.0, "{pred}");
        assert_eq!(ev["object"]["f1"], 1.0, "{pred}");
        assert_eq!(ev["ap"]["ap50"], 1.0, "{pred}");
        assert!(ev["throughput"]["km2_per_s"].is_number());
    }
    let csv = run(d, &["evaluate", "--pred", "logits", "--gt", "w/gt_mask", "--csv"]);
    let text = String::from_utf8(csv.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("1.000000,"));

    let stats = json(d, &["stats", "--geojson", "pred.geojson"]);
    let gt_stats = json(d, &["stats", "--geojson", "w/gt.geojson"]);
    assert_eq!(stats["field_count"], gt_stats["field_count"]);

    let ch = json(d, &["change", "--y1", "logits", "--y2", "logits", "--out", "change"]);
    assert_eq!(ch["changed_pixels"], 0);
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    json(d, &["--workers", "1", "stitch", "--input", "w/bands", "--out", "a", "--patch-size", "48"]);
    let out = Command::new(BIN)
        .current_dir(d)
        .env("FIELDSCALE_WORKERS", "6")
        .args(["stitch", "--input", "w/bands", "--out", "b", "--patch-size", "48"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.join("a.bin")).unwrap(), std::fs::read(d.join("b.bin")).unwrap());
}

#[test]
fn exec_model_matches_in_process_stub() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    json(d, &["stitch", "--input", "w/bands", "--out", "native", "--patch-size", "64"]);
    let exec = format!("exec:{BIN} serve-model --model oracle");
    json(d, &["--workers", "3", "stitch", "--input", "w/bands", "--out", "exec", "--patch-size", "64", "--model", &exec]);
    assert_eq!(std::fs::read(d.join("native.bin")).unwrap(), std::fs::read(d.join("exec.bin")).unwrap());

    let broken = run(d, &["stitch", "--input", "w/bands", "--out", "x", "--model", "exec:false"]);
    assert_eq!(broken.status.code(), Some(1));
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    std::fs::write(d.join("cfg.toml"), "patch_size = 32\n[stitch]\npatch_size = 48\noverlap = 0.1\n").unwrap();
    let from_file = json(d, &["--config", "cfg.toml", "stitch", "--input", "w/bands", "--out", "a"]);
    assert_eq!(from_file["config"]["params"]["patch_size"], 48);
    assert_eq!(from_file["config"]["params"]["overlap"], 0.1);
    let flag = json(d, &["--config", "cfg.toml", "stitch", "--input", "w/bands", "--out", "a", "--patch-size", "40"]);
    assert_eq!(flag["config"]["params"]["patch_size"], 40);
    let default = json(d, &["stitch", "--input", "w/bands", "--out", "a"]);
    assert_eq!(default["config"]["params"]["patch_size"], 256);

    std::fs::write(d.join("bad.toml"), "[stitch]\npatch_size = \"big\"\n").unwrap();
    let bad = run(d, &["--config", "bad.toml", "stitch", "--input", "w/bands", "--out", "a"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn robustness_summary_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["robustness", "--size", "48", "--worlds", "2", "--fields", "5", "--csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(header.len(), row.len());
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("pixel_iou"), "1.000000");
    assert_eq!(col("order_iou_delta"), "0.000000");
    assert_eq!(col("agreement"), "1.000000");
    assert_eq!(col("brightness_iou_delta"), "");

    let v = json(dir.path(), &["robustness", "--size", "48", "--worlds", "2", "--fields", "5", "--model", "stub:frame0"]);
    assert_eq!(v["report"]["robustness"]["order_iou_delta"], 1.0);
}

#[test]
fn select_scenes_on_a_scene_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("scenes");
    std::fs::create_dir(&d).unwrap();
    let gt = serde_json::json!({
        "origin_x": 0.0, "origin_y": 20.0, "pixel_size_x": 10.0, "pixel_size_y": -10.0, "crs_id": "EPSG:32633"
    });
    let write = |stem: &str, dtype: &str, shape: Vec<usize>, bytes: Vec<u8>| {
        std::fs::write(d.join(format!("{stem}.bin")), bytes).unwrap();
        let header = serde_json::json!({"dtype": dtype, "shape": shape, "geotransform": gt, "nodata": null});
        std::fs::write(d.join(format!("{stem}.json")), header.to_string()).unwrap();
    };
    // s0 valid on the top row, s1 on the bottom row, s2 everywhere.
    let scl = [[4u8, 4, 9, 9], [9, 9, 4, 4], [4, 4, 4, 4]];
    let mut index = Vec::new();
    for (k, codes) in scl.iter().enumerate() {
        let vals: Vec<u8> = (0..4).flat_map(|i| ((k * 10 + i) as f32).to_le_bytes()).collect();
        write(&format!("b{k}"), "float32", vec![1, 2, 2], vals);
        write(&format!("s{k}"), "uint8", vec![2, 2], codes.to_vec());
        index.push(serde_json::json!({
            "timestamp": format!("2023-05-0{}", k + 1), "cloud_cover_pct": 10.0,
            "bands": format!("b{k}"), "scl": format!("s{k}")
        }));
    }
    std::fs::write(d.join("scenes.json"), serde_json::json!({ "scenes": index }).to_string()).unwrap();

    let v = json(dir.path(), &["select-scenes", "--dir", "scenes", "--target-coverage", "2", "--out", "comp"]);
    assert_eq!(v["selected"], serde_json::json!(["2023-05-03", "2023-05-01", "2023-05-02"]));
    let counts = std::fs::read(dir.path().join("comp_count.bin")).unwrap();
    let counts: Vec<u32> = counts.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(counts, vec![2, 2, 2, 2]);
    let median = std::fs::read(dir.path().join("comp.bin")).unwrap();
    let median: Vec<f32> = median.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    // Pixel 0 sees s0 (0) and s2 (20); pixel 3 sees s1 (13) and s2 (23).
    assert_eq!(median, vec![10.0, 11.0, 17.0, 18.0]);
}

#[test]
fn loss_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(dir.path(), &["loss-check", "--omega", "0.75"]);
    assert_eq!(v["pass"], true);
    assert_eq!(v["results"].as_array().unwrap().len(), 14);
}
