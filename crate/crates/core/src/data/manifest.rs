use std::io::{Read, Write};

use super::sample::parse_row_field;
use super::{DataError, Sample};

pub const MANIFEST_HEADER: [&str; 4] = ["path", "label", "patient_id", "magnification"];

/// Parses a `path,label,patient_id,magnification` CSV. Row numbers in errors
/// count the header as row 1.
pub fn load_manifest<R: Read>(source: R) -> Result<Vec<Sample>, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| DataError::Manifest {
        row: 1,
        message: e.to_string(),
    })?;
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| DataError::Manifest {
            row: 1,
            message: format!("missing column {name:?}"),
        })?;
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| DataError::Manifest {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| {
            record.get(cols[c]).ok_or_else(|| DataError::Manifest {
                row,
                message: format!("missing value for {:?}", MANIFEST_HEADER[c]),
            })
        };
        let path = field(0)?.to_string();
        let patient_id = field(2)?.to_string();
        if path.is_empty() || patient_id.is_empty() {
            return Err(DataError::Manifest {
                row,
                message: "empty path or patient_id".into(),
            });
        }
        samples.push(Sample {
            path,
            label: parse_row_field(field(1)?, row)?,
            patient_id,
            magnification: parse_row_field(field(3)?, row)?,
        });
    }
    Ok(samples)
}

pub fn write_manifest<W: Write>(sink: W, samples: &[Sample]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(MANIFEST_HEADER)?;
    for s in samples {
        w.write_record([
            s.path.as_str(),
            s.label.as_str(),
            s.patient_id.as_str(),
            &s.magnification.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
