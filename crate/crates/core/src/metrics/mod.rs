//! Patient-level and image-level accuracy.
//!
//! `P_rp` is one patient's fraction of correctly classified images, `P_arp` the
//! unweighted mean of `P_rp` over patients and `P_img` the fraction correct over
//! all images. Everything is computed in `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{Label, Magnification};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub patient_id: String,
    pub magnification: Magnification,
    pub true_label: Label,
    pub predicted_label: Label,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.true_label == self.predicted_label
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no prediction records")]
    Empty,
    #[error("records span several patients ({0} and {1})")]
    MixedPatients(String, String),
    #[error("records csv: {0}")]
    Csv(String),
}

/// Counts for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientStats {
    pub n_np: usize,
    pub n_rp: usize,
    pub p_rp: f64,
}

/// `P_rp` for records that all belong to one patient.
pub fn patient_accuracy(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    if let Some(other) = records.iter().find(|r| r.patient_id != first.patient_id) {
        return Err(MetricsError::MixedPatients(first.patient_id.clone(), other.patient_id.clone()));
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

fn group_by_patient(records: &[PredictionRecord]) -> BTreeMap<&str, PatientStats> {
    let mut groups: BTreeMap<&str, PatientStats> = BTreeMap::new();
    for r in records {
        let g = groups.entry(&r.patient_id).or_insert(PatientStats {
            n_np: 0,
            n_rp: 0,
            p_rp: 0.0,
        });
        g.n_np += 1;
        g.n_rp += usize::from(r.correct());
    }
    for g in groups.values_mut() {
        g.p_rp = g.n_rp as f64 / g.n_np as f64;
    }
    groups
}

/// `P_arp`: mean of per-patient accuracies, every patient weighted equally.
pub fn average_patient_accuracy(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let groups = group_by_patient(records);
    Ok(groups.values().map(|g| g.p_rp).sum::<f64>() / groups.len() as f64)
}

/// `P_img`: fraction of all records classified correctly.
pub fn image_accuracy(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

/// Aggregates over one record subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub p_arp: f64,
    pub p_img: f64,
    pub n_p: usize,
    pub n_all: usize,
}

fn aggregate(records: &[PredictionRecord]) -> Result<Aggregate, MetricsError> {
    Ok(Aggregate {
        p_arp: average_patient_accuracy(records)?,
        p_img: image_accuracy(records)?,
        n_p: group_by_patient(records).len(),
        n_all: records.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub patients: BTreeMap<String, PatientStats>,
    pub p_arp: f64,
    pub p_img: f64,
    pub n_p: usize,
    pub n_all: usize,
    /// Keyed by magnification value (`"40"`, `"100"`, ...); empty unless requested.
    pub by_magnification: BTreeMap<String, Aggregate>,
}

pub fn build_report(records: &[PredictionRecord], group_by_magnification: bool) -> Result<MetricsReport, MetricsError> {
    let all = aggregate(records)?;
    let mut by_magnification = BTreeMap::new();
    if group_by_magnification {
        for m in Magnification::ALL {
            let subset: Vec<_> = records.iter().filter(|r| r.magnification == m).cloned().collect();
            if !subset.is_empty() {
                by_magnification.insert(m.to_string(), aggregate(&subset)?);
            }
        }
    }
    Ok(MetricsReport {
        patients: group_by_patient(records)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        p_arp: all.p_arp,
        p_img: all.p_img,
        n_p: all.n_p,
        n_all: all.n_all,
        by_magnification,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Rows `p_arp` and `p_img`; one column per magnification present, then `all`.
    pub fn table_csv(&self) -> String {
        let mut mags: Vec<(u32, &Aggregate)> = self
            .by_magnification
            .iter()
            .map(|(k, v)| (k.parse().expect("magnification key"), v))
            .collect();
        mags.sort_by_key(|m| m.0);
        let mut out = String::from("metric");
        for (m, _) in &mags {
            out.push_str(&format!(",{m}x"));
        }
        out.push_str(",all\n");
        for (name, get) in [("p_arp", (|a: &Aggregate| a.p_arp) as fn(&Aggregate) -> f64), ("p_img", |a| a.p_img)] {
            out.push_str(name);
            for (_, a) in &mags {
                out.push_str(&format!(",{:.6}", get(a)));
            }
            let overall = if name == "p_arp" { self.p_arp } else { self.p_img };
            out.push_str(&format!(",{overall:.6}\n"));
        }
        out
    }
}

pub fn write_records<W: Write>(sink: W, records: &[PredictionRecord]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(sink);
    for r in records {
        w.serialize(r).map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Csv(e.to_string()))
}

pub fn read_records<R: Read>(source: R) -> Result<Vec<PredictionRecord>, MetricsError> {
    csv::Reader::from_reader(source)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| MetricsError::Csv(e.to_string()))
}
