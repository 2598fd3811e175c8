//! ECG record container, the `LGAE` file format, patient-wise splitting,
//! batching and a synthetic generator.

mod batch;
mod format;
mod split;
mod synth;

pub use batch::{batches, Batch};
pub use format::{decode, encode, read_dataset, write_dataset, MAGIC, VERSION};
pub use split::{split_by_patient, SplitSpec};
pub use synth::{synth_dataset, LabelMode, SynthSpec};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Abnormality names in label-column order.
pub const CLASS_NAMES: [&str; 6] = ["1dAVb", "RBBB", "LBBB", "SB", "AF", "ST"];

pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 400;

/// Column name for class `k`, falling back to `class_k` past the named six.
pub fn class_name(k: usize) -> String {
    CLASS_NAMES.get(k).map_or_else(|| format!("class_{k}"), |s| s.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    /// `[C, N₀]` in millivolts.
    pub signal: Tensor<f32>,
    /// Multi-hot, one entry per class.
    pub labels: Vec<u8>,
    pub patient_id: u64,
}

/// A set of records sharing one header.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub leads: usize,
    pub len: usize,
    pub classes: usize,
    pub sample_rate_hz: u32,
    pub records: Vec<EcgRecord>,
}

impl Dataset {
    pub fn new(leads: usize, len: usize, classes: usize, sample_rate_hz: u32) -> Self {
        Dataset {
            leads,
            len,
            classes,
            sample_rate_hz,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same header, different records.
    pub fn with_records(&self, records: Vec<EcgRecord>) -> Self {
        Dataset {
            records,
            ..Dataset::new(self.leads, self.len, self.classes, self.sample_rate_hz)
        }
    }

    pub fn check(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.signal.shape() != [self.leads, self.len] {
                return Err(Error::config(format!(
                    "record {i}: signal shape {:?}, header says [{}, {}]",
                    r.signal.shape(),
                    self.leads,
                    self.len
                )));
            }
            if r.labels.len() != self.classes || r.labels.iter().any(|&b| b > 1) {
                return Err(Error::config(format!("record {i}: labels must be {} entries of 0/1", self.classes)));
            }
            if let Some(j) = r.signal.first_non_finite() {
                return Err(Error::NonFinite { op: "record", index: j });
            }
        }
        Ok(())
    }

    /// Write `record_index, patient_id, <class columns>` as CSV.
    pub fn write_labels_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["record_index".to_string(), "patient_id".to_string()];
        header.extend((0..self.classes).map(class_name));
        w.write_record(&header)?;
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![i.to_string(), r.patient_id.to_string()];
            row.extend(r.labels.iter().map(|b| b.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
