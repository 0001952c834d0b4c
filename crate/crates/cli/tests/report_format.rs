use std::collections::BTreeMap;

use oodc_cli::report::{metrics_csv, MetricsRow, Provenance, Report, Row, CSV_HEADER, METRICS_HEADER};
use oodcert::certificates::Method;
use oodcert::decision::{quadrant_metrics, DecisionBoundary};

fn row(id: u64, method: Method, c: f64, e: Option<f64>) -> Row {
    Row {
        sample_id: id,
        dataset: "wave-test".into(),
        method,
        certificate: c,
        error: e,
        relative_error: e.map(|x| x / 2.0),
        label: None,
        fine_label: None,
    }
}

fn sample() -> Report {
    let mut r = Report {
        rows: vec![
            row(0, Method::Jlbc, -900.0, Some(0.01)),
            row(0, Method::JDPath, 12.5, Some(0.01)),
            row(1, Method::Jlbc, -1200.0, None),
            row(1, Method::JDPath, 40.0, None),
        ],
        provenance: Provenance::new("ab".repeat(32)),
        ..Report::default()
    };
    for (m, t, s) in [(Method::Jlbc, -1000.0, -1.0), (Method::JDPath, 20.0, 1.0)] {
        r.boundary.insert(
            m.name().into(),
            DecisionBoundary {
                threshold: t,
                error_threshold: Some(0.02),
                median: 0.0,
                std: 1.0,
                alpha: 1.5,
                beta: 5.0,
                sign: s,
                count: 8,
            },
        );
    }
    r.apply_labels();
    r
}

#[test]
fn report_csv_layout() {
    let r = sample();
    let bytes = r.csv().unwrap();
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = rd.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(header, CSV_HEADER);
    let recs: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 4);
    assert_eq!(&recs[0], &csv::StringRecord::from(vec!["0", "wave-test", "JLBC", "-900", "0.01", "ID", "ID"]));
    assert_eq!(&recs[1], &csv::StringRecord::from(vec!["0", "wave-test", "JDPath", "12.5", "0.01", "ID", "ID"]));
    assert_eq!(&recs[2], &csv::StringRecord::from(vec!["1", "wave-test", "JLBC", "-1200", "", "OOD", "OOD"]));
    assert_eq!(&recs[3], &csv::StringRecord::from(vec!["1", "wave-test", "JDPath", "40", "", "OOD", "OOD"]));
    let f: f64 = recs[0][3].parse().unwrap();
    assert_eq!(f, -900.0);
}

#[test]
fn report_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let r = sample();
    r.write(&path).unwrap();
    assert_eq!(Report::read(&path).unwrap(), r);
    assert!(dir.path().join("r.csv").exists());

    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["boundary", "fit", "metrics", "provenance", "rows"]);
    assert_eq!(v["rows"][2]["error"], serde_json::Value::Null);
    assert_eq!(v["boundary"]["JLBC"]["threshold"], -1000.0);

    let mut bad = v.clone();
    bad["rows"][0]["extra"] = 1.into();
    std::fs::write(&path, serde_json::to_vec(&bad).unwrap()).unwrap();
    assert!(Report::read(&path).is_err());
}

#[test]
fn metrics_csv_layout() {
    let r = sample();
    let b = &r.boundary["JLBC"];
    let mut recs = r.records(Method::Jlbc);
    recs[1].error = Some(0.05);
    let m = quadrant_metrics(&recs, b).unwrap();
    let row = MetricsRow::new("wave-test", Method::Jlbc, &m);
    assert_eq!((row.tp, row.fp, row.tn, row.fn_), (1, 0, 1, 0));
    assert_eq!(row.acc, 1.0);
    let v = serde_json::to_value(&row).unwrap();
    for k in ["ACC", "FPR", "FNR", "FDR", "ARCB", "TP", "FP", "TN", "FN"] {
        assert!(v.get(k).is_some(), "{k} missing from {v}");
    }
    let bytes = metrics_csv(&[row]).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
    assert!(lines.next().unwrap().starts_with("wave-test,JLBC,"));
    let map: BTreeMap<String, MetricsRow> = serde_json::from_value(serde_json::json!({ "wave-test/JLBC": v })).unwrap();
    assert_eq!(map.len(), 1);
}
