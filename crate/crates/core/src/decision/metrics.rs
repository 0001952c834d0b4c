use serde::{Deserialize, Serialize};

use super::{classify, DecisionBoundary, Label};
use crate::certificates::CertificateRecord;
use crate::error::{Error, Result};

/// Confusion counts; positive = classified OOD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl QuadrantCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub fdr: f64,
    /// Share of critical records (relative error ≥ 1) classified OOD.
    pub arcb: Option<f64>,
    pub counts: QuadrantCounts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn errors_of(records: &[CertificateRecord]) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            r.error
                .ok_or_else(|| Error::invalid(format!("record {} ({}) has no ground-truth error", r.sample_id, r.method)))
        })
        .collect()
}

fn error_threshold(b: &DecisionBoundary) -> Result<f64> {
    b.error_threshold
        .ok_or_else(|| Error::invalid("boundary has no error threshold"))
}

pub fn quadrant_counts(records: &[CertificateRecord], b: &DecisionBoundary) -> Result<QuadrantCounts> {
    let e_b = error_threshold(b)?;
    let errors = errors_of(records)?;
    let mut q = QuadrantCounts::default();
    for (r, e) in records.iter().zip(errors) {
        let flagged = classify(r.certificate, b).0 == Label::Ood;
        match (flagged, e > e_b) {
            (true, true) => q.tp += 1,
            (true, false) => q.fp += 1,
            (false, false) => q.tn += 1,
            (false, true) => q.fn_ += 1,
        }
    }
    Ok(q)
}

pub fn quadrant_metrics(records: &[CertificateRecord], b: &DecisionBoundary) -> Result<Metrics> {
    let q = quadrant_counts(records, b)?;
    let critical: Vec<&CertificateRecord> = records
        .iter()
        .filter(|r| r.relative_error.is_some_and(|e| e >= 1.0))
        .collect();
    let arcb = (!critical.is_empty()).then(|| {
        let hit = critical
            .iter()
            .filter(|r| classify(r.certificate, b).0 == Label::Ood)
            .count();
        ratio(hit, critical.len())
    });
    Ok(Metrics {
        acc: ratio(q.tp + q.tn, q.total()),
        fpr: ratio(q.fp, q.fp + q.tn),
        fnr: ratio(q.fn_, q.fn_ + q.tp),
        fdr: ratio(q.fp, q.fp + q.tp),
        arcb,
        counts: q,
    })
}
