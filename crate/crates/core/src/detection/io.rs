use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{DetectionError, MetricsReport, Sample};
use crate::event_space::EventSelector;

fn csv_err(e: csv::Error) -> DetectionError {
    DetectionError::Csv(e.to_string())
}

pub fn write_dataset_csv(samples: &[Sample], out: impl Write) -> Result<(), DetectionError> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DetectionError::Csv(e.to_string()))
}

pub fn read_dataset_csv(input: impl Read) -> Result<Vec<Sample>, DetectionError> {
    let mut r = csv::Reader::from_reader(input);
    let samples = r.deserialize().collect::<Result<Vec<Sample>, _>>().map_err(csv_err)?;
    if let Some(bad) = samples.iter().position(|s| s.label > 1) {
        return Err(DetectionError::Csv(format!("record {}: label must be 0 or 1", bad + 1)));
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRow {
    pub selector: EventSelector,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub passed: bool,
}

impl ScreeningRow {
    pub fn new(selector: EventSelector, m: &MetricsReport, passed: bool) -> Self {
        Self {
            selector,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: m.auc,
            passed,
        }
    }
}

pub fn write_screening_csv(rows: &[ScreeningRow], out: impl Write) -> Result<(), DetectionError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DetectionError::Csv(e.to_string()))
}

pub fn read_screening_csv(input: impl Read) -> Result<Vec<ScreeningRow>, DetectionError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(csv_err)
}
