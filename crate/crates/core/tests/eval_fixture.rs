use std::path::{Path, PathBuf};

use probwtal_core::evaluate::{default_thresholds, evaluate, EvalReport};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval").join(name)
}

fn report() -> EvalReport {
    evaluate(&fixture("results.json"), &fixture("ground_truth.json"), None, &default_thresholds()).unwrap()
}

#[test]
fn fixture_reproduces_the_hand_computed_report() {
    let want: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(fixture("expected_report.json")).unwrap()).unwrap();
    let got = report();
    assert_eq!(got.thresholds.len(), want.thresholds.len());
    for (g, w) in got.thresholds.iter().zip(&want.thresholds) {
        assert_eq!(g.iou, w.iou);
        assert!((g.map - w.map).abs() < 1e-12, "mAP at {}: {} vs {}", g.iou, g.map, w.map);
        for (c, ap) in &w.ap {
            assert!((g.ap[c] - ap).abs() < 1e-12, "{c} at {}", g.iou);
        }
    }
    for (g, w) in got.averages.iter().zip(&want.averages) {
        assert_eq!(g.range, w.range);
        assert!((g.map - w.map).abs() < 1e-12, "{}", g.range);
    }
    assert_eq!(got.skipped_classes, want.skipped_classes);
}

#[test]
fn fixture_table_matches() {
    let want = std::fs::read_to_string(fixture("expected_table.txt")).unwrap();
    assert_eq!(report().to_table(), want);
}

#[test]
fn video_order_in_files_does_not_matter() {
    let dir = tempfile::tempdir().unwrap();
    let reorder = |name: &str, key: &str| {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap();
        let mut entries: Vec<(String, serde_json::Value)> =
            v[key].as_object().unwrap().iter().map(|(k, x)| (k.clone(), x.clone())).collect();
        entries.reverse();
        let body: Vec<String> =
            entries.iter().map(|(k, x)| format!("{}: {}", serde_json::to_string(k).unwrap(), x)).collect();
        let text = format!("{{\"version\": \"1.0\", \"{key}\": {{{}}}}}", body.join(", "));
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    };
    let r = reorder("results.json", "results");
    let g = reorder("ground_truth.json", "database");
    let shuffled = evaluate(&r, &g, None, &default_thresholds()).unwrap();
    assert_eq!(shuffled, report());
}

#[test]
fn results_equal_to_ground_truth_score_one() {
    let gt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("ground_truth.json")).unwrap()).unwrap();
    let mut results = serde_json::Map::new();
    for (vid, entry) in gt["database"].as_object().unwrap() {
        let list: Vec<serde_json::Value> = entry["annotations"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| serde_json::json!({"label": a["label"], "score": 1.0, "segment": a["segment"]}))
            .collect();
        results.insert(vid.clone(), list.into());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("self.json");
    std::fs::write(&path, serde_json::json!({"version": "1.0", "results": results}).to_string()).unwrap();
    let r = evaluate(&path, &fixture("ground_truth.json"), None, &default_thresholds()).unwrap();
    assert!(r.thresholds.iter().all(|t| t.map == 1.0));
}

#[test]
fn evaluation_is_pure() {
    let a = serde_json::to_string(&report()).unwrap();
    let b = serde_json::to_string(&report()).unwrap();
    assert_eq!(a, b);
}
