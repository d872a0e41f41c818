//! Voxel-wise Dice, sensitivity and specificity, patient-wise merging of
//! slice predictions, aggregation and the records CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Config id used for inter-reader records.
pub const IRV_CONFIG: &str = "IRV";
/// Probabilities strictly above this are foreground.
pub const THRESHOLD: f32 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: prediction {pred:?} vs reference {reference:?}")]
    ShapeMismatch { pred: Vec<usize>, reference: Vec<usize> },
    #[error("reference contains non-binary value {0}")]
    NonBinaryReference(u8),
    #[error("mask contains non-binary value {0}")]
    NonBinaryInput(u8),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric { metric: Metric, reason: &'static str },
    #[error("invalid loss parameters: {0}")]
    InvalidParams(String),
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("no prediction for slice {0}")]
    MissingSlice(usize),
    #[error("slice {0} predicted more than once")]
    DuplicateSlice(usize),
    #[error("records csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Sensitivity,
    Specificity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Sensitivity, Metric::Specificity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Sensitivity => "Sensitivity",
            Metric::Specificity => "Specificity",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dice(&self) -> Result<f64, MetricError> {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            return Err(MetricError::UndefinedMetric { metric: Metric::Dice, reason: "both masks are empty" });
        }
        Ok(2.0 * self.tp as f64 / d as f64)
    }

    pub fn sensitivity(&self) -> Result<f64, MetricError> {
        let d = self.tp + self.fn_;
        if d == 0 {
            return Err(MetricError::UndefinedMetric { metric: Metric::Sensitivity, reason: "reference has no foreground" });
        }
        Ok(self.tp as f64 / d as f64)
    }

    pub fn specificity(&self) -> Result<f64, MetricError> {
        let d = self.tn + self.fp;
        if d == 0 {
            return Err(MetricError::UndefinedMetric { metric: Metric::Specificity, reason: "reference has no background" });
        }
        Ok(self.tn as f64 / d as f64)
    }

    pub fn metric(&self, m: Metric) -> Result<f64, MetricError> {
        match m {
            Metric::Dice => self.dice(),
            Metric::Sensitivity => self.sensitivity(),
            Metric::Specificity => self.specificity(),
        }
    }
}

fn check_pair(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<(), MetricError> {
    if pred.shape() != reference.shape() {
        return Err(MetricError::ShapeMismatch { pred: pred.shape().to_vec(), reference: reference.shape().to_vec() });
    }
    Ok(())
}

pub fn confusion_counts(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<Confusion, MetricError> {
    check_pair(pred, reference)?;
    let mut c = Confusion::default();
    for (&p, &r) in pred.iter().zip(reference.iter()) {
        match (p, r) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            (v, 0 | 1) => return Err(MetricError::NonBinaryInput(v)),
            (_, v) => return Err(MetricError::NonBinaryInput(v)),
        }
    }
    Ok(c)
}

pub fn dice(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<f64, MetricError> {
    confusion_counts(pred, reference)?.dice()
}

pub fn sensitivity(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<f64, MetricError> {
    confusion_counts(pred, reference)?.sensitivity()
}

pub fn specificity(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<f64, MetricError> {
    confusion_counts(pred, reference)?.specificity()
}

pub fn binarize(prob: &Array3<f32>) -> Array3<u8> {
    prob.mapv(|p| u8::from(p > THRESHOLD))
}

/// Stacks per-slice probability maps (`(depth index, map)`) along depth.
pub fn merge_slice_predictions(slices: Vec<(usize, Array2<f32>)>, depth: usize) -> Result<Array3<f32>, MetricError> {
    let Some((_, first)) = slices.first() else {
        return Err(MetricError::MissingSlice(0));
    };
    let (nx, ny) = first.dim();
    let mut out = Array3::<f32>::zeros((nx, ny, depth));
    let mut seen = vec![false; depth];
    for (z, map) in slices {
        if map.dim() != (nx, ny) {
            return Err(MetricError::ShapeMismatch { pred: map.shape().to_vec(), reference: vec![nx, ny] });
        }
        if z >= depth {
            return Err(MetricError::ShapeMismatch { pred: vec![nx, ny, z + 1], reference: vec![nx, ny, depth] });
        }
        if std::mem::replace(&mut seen[z], true) {
            return Err(MetricError::DuplicateSlice(z));
        }
        out.slice_mut(s![.., .., z]).assign(&map);
    }
    if let Some(z) = seen.iter().position(|v| !v) {
        return Err(MetricError::MissingSlice(z));
    }
    Ok(out)
}

/// One patient evaluated under one configuration. Undefined metrics are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case_id: String,
    pub config_id: String,
    pub fold: Option<usize>,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl MetricsRecord {
    pub fn from_confusion(case_id: &str, config_id: &str, fold: Option<usize>, c: Confusion) -> Self {
        MetricsRecord {
            case_id: case_id.to_string(),
            config_id: config_id.to_string(),
            fold,
            dice: c.dice().ok(),
            sensitivity: c.sensitivity().ok(),
            specificity: c.specificity().ok(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        }
    }

    pub fn confusion(&self) -> Confusion {
        Confusion { tp: self.tp, fp: self.fp, fn_: self.fn_, tn: self.tn }
    }

    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Dice => self.dice,
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
        }
    }
}

/// Thresholds a probability volume and scores it against the reference.
pub fn evaluate_patient(
    prob: &Array3<f32>,
    reference: &Array3<u8>,
    case_id: &str,
    config_id: &str,
    fold: Option<usize>,
) -> Result<MetricsRecord, MetricError> {
    let c = confusion_counts(&binarize(prob), reference)?;
    Ok(MetricsRecord::from_confusion(case_id, config_id, fold, c))
}

/// Second reader scored against the first, which serves as reference.
pub fn inter_reader(reader_a: &Array3<u8>, reader_b: &Array3<u8>, case_id: &str) -> Result<MetricsRecord, MetricError> {
    let c = confusion_counts(reader_b, reader_a)?;
    Ok(MetricsRecord::from_confusion(case_id, IRV_CONFIG, None, c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
    /// Records whose metric was undefined.
    pub skipped: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and std per (config, metric). Undefined metrics are skipped and counted.
pub type Summary = BTreeMap<(String, Metric), Option<Stat>>;

pub fn aggregate(records: &[MetricsRecord]) -> Result<Summary, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut groups: BTreeMap<(String, Metric), (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        for m in Metric::ALL {
            let e = groups.entry((r.config_id.clone(), m)).or_default();
            match r.metric(m) {
                Some(v) => e.0.push(v),
                None => e.1 += 1,
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(k, (vals, skipped))| {
            let stat = (!vals.is_empty()).then(|| {
                let (mean, std) = mean_std(&vals);
                Stat { mean, std, n: vals.len(), skipped }
            });
            (k, stat)
        })
        .collect())
}

pub fn write_records<W: Write>(w: W, records: &[MetricsRecord]) -> Result<(), MetricError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).map_err(|e| MetricError::Csv(e.to_string()))?;
    }
    wr.flush().map_err(|e| MetricError::Csv(e.to_string()))
}

/// Parses a records CSV, re-checking that counts and metrics agree.
pub fn read_records<R: Read>(r: R) -> Result<Vec<MetricsRecord>, MetricError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<MetricsRecord>().enumerate() {
        let rec = row.map_err(|e| MetricError::Csv(format!("row {}: {e}", i + 1)))?;
        let expect = MetricsRecord::from_confusion(&rec.case_id, &rec.config_id, rec.fold, rec.confusion());
        for m in Metric::ALL {
            let ok = match (rec.metric(m), expect.metric(m)) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
                (None, None) => true,
                _ => false,
            };
            if !ok {
                return Err(MetricError::Csv(format!("row {}: {m} disagrees with confusion counts", i + 1)));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Column header of the records CSV.
pub const RECORDS_HEADER: &str = "case_id,config_id,fold,dice,sensitivity,specificity,tp,fp,fn,tn";
