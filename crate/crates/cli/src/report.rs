use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use oodcert::certificates::{CertificateRecord, Method};
use oodcert::datagen::write_atomic;
use oodcert::decision::{classify, DecisionBoundary, ErrorFit, FineLabel, Label, Metrics};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CSV_HEADER: [&str; 7] = ["sample_id", "dataset", "method", "certificate", "error", "label", "fine_label"];
pub const METRICS_HEADER: [&str; 11] = ["dataset", "method", "ACC", "FPR", "FNR", "FDR", "ARCB", "TP", "FP", "TN", "FN"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Row {
    pub sample_id: u64,
    pub dataset: String,
    pub method: Method,
    pub certificate: f64,
    pub error: Option<f64>,
    pub relative_error: Option<f64>,
    pub label: Option<Label>,
    pub fine_label: Option<FineLabel>,
}

impl Row {
    pub fn from_record(r: &CertificateRecord) -> Self {
        Self {
            sample_id: r.sample_id,
            dataset: r.dataset.clone(),
            method: r.method,
            certificate: r.certificate,
            error: r.error,
            relative_error: r.relative_error,
            label: None,
            fine_label: None,
        }
    }

    pub fn record(&self) -> CertificateRecord {
        CertificateRecord {
            sample_id: self.sample_id,
            dataset: self.dataset.clone(),
            method: self.method,
            certificate: self.certificate,
            error: self.error,
            relative_error: self.relative_error,
        }
    }
}

/// Fixed-boundary metrics of one (dataset, method) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub dataset: String,
    pub method: Method,
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "FPR")]
    pub fpr: f64,
    #[serde(rename = "FNR")]
    pub fnr: f64,
    #[serde(rename = "FDR")]
    pub fdr: f64,
    #[serde(rename = "ARCB")]
    pub arcb: Option<f64>,
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "TN")]
    pub tn: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
}

impl MetricsRow {
    pub fn new(dataset: &str, method: Method, m: &Metrics) -> Self {
        Self {
            dataset: dataset.to_owned(),
            method,
            acc: m.acc,
            fpr: m.fpr,
            fnr: m.fnr,
            fdr: m.fdr,
            arcb: m.arcb,
            tp: m.counts.tp,
            fp: m.counts.fp,
            tn: m.counts.tn,
            fn_: m.counts.fn_,
        }
    }
}

/// Error-vs-certificate fit with its held-out coverage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitEntry {
    pub fit: ErrorFit,
    pub fit_samples: Vec<u64>,
    /// Share of held-out rows inside the band, absent without held-out rows.
    pub coverage: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_sha256: String,
    /// Input artifact name → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub version: String,
}

impl Provenance {
    pub fn new(config_sha256: String) -> Self {
        Self {
            config_sha256,
            inputs: BTreeMap::new(),
            version: format!("oodc {}", env!("CARGO_PKG_VERSION")),
        }
    }

    pub fn add_file(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(name.to_owned(), hash_file(path)?);
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub rows: Vec<Row>,
    /// Keyed by method name.
    pub boundary: BTreeMap<String, DecisionBoundary>,
    pub metrics: BTreeMap<String, MetricsRow>,
    #[serde(default)]
    pub fit: BTreeMap<String, FitEntry>,
    pub provenance: Provenance,
}

impl Report {
    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method);
            }
        }
        out
    }

    pub fn records(&self, method: Method) -> Vec<CertificateRecord> {
        self.rows.iter().filter(|r| r.method == method).map(Row::record).collect()
    }

    /// Fills `label`/`fine_label` of every row whose method has a boundary.
    pub fn apply_labels(&mut self) {
        for row in &mut self.rows {
            if let Some(b) = self.boundary.get(row.method.name()) {
                let (l, f) = classify(row.certificate, b);
                row.label = Some(l);
                row.fine_label = Some(f);
            }
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::missing(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Writes `path` (JSON) and the flat CSV next to it.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self)?;
        write_atomic(&path.with_extension("csv"), &self.csv()?)?;
        Ok(())
    }

    pub fn csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.sample_id.to_string(),
                r.dataset.clone(),
                r.method.to_string(),
                r.certificate.to_string(),
                opt(r.error),
                r.label.map(|l| l.to_string()).unwrap_or_default(),
                r.fine_label.map(|l| l.to_string()).unwrap_or_default(),
            ])?;
        }
        w.into_inner().map_err(|e| CliError::Other(e.to_string()))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for m in rows {
        w.write_record([
            m.dataset.clone(),
            m.method.to_string(),
            m.acc.to_string(),
            m.fpr.to_string(),
            m.fnr.to_string(),
            m.fdr.to_string(),
            opt(m.arcb),
            m.tp.to_string(),
            m.fp.to_string(),
            m.tn.to_string(),
            m.fn_.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::missing(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::missing(path, e))?;
    Ok(crate::config::sha256_hex(&bytes))
}

pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_owned();
    name.push(suffix);
    path.with_file_name(name)
}
