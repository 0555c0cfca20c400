//! Labeled univariate time series: archive loading, preparation, splits and
//! a synthetic generator.
//!
//! Archives use the UCR convention: one instance per row, first field the
//! class label, remaining fields the series, tab or comma delimited.
//! Preparation resamples every series to a common length by linear
//! interpolation and then z-normalizes it; the order is fixed here and echoed
//! in report metadata.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::rng;

/// Common series length every dataset is resampled to before training.
pub const DEFAULT_SERIES_LENGTH: usize = 100;

/// Population standard deviations below this are treated as constant.
pub const CONSTANT_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty archive")]
    EmptyFile,
    #[error("row {row}: expected {expected} fields, got {got}")]
    RaggedRow { row: usize, expected: usize, got: usize },
    #[error("row {row}, column {col}: cannot parse {text:?} as a number")]
    NonNumeric { row: usize, col: usize, text: String },
    #[error("row {row}: label {text:?} is not an integer")]
    BadLabel { row: usize, text: String },
    #[error("archive holds {found} class(es); at least 2 required")]
    TooFewClasses { found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled series.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub values: Vec<f64>,
    pub label: usize,
    pub prepared: bool,
}

/// A set of instances sharing length and label space.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub instances: Vec<Instance>,
    pub num_classes: usize,
    pub series_length: usize,
    pub name: String,
    pub split: Split,
}

/// Metadata sidecar written next to exported archives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    pub series_length: usize,
    pub num_instances: usize,
    pub split: Split,
    pub prepared: bool,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Instances per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Returns instances flattened to a `[len, 1, T]`-shaped value buffer.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.series_length);
        for inst in &self.instances {
            out.extend_from_slice(&inst.values);
        }
        out
    }

    fn check_invariants(&self) -> Result<(), DataError> {
        if self.instances.is_empty() {
            return Err(DataError::EmptyFile);
        }
        if self.num_classes < 2 {
            return Err(DataError::TooFewClasses { found: self.num_classes });
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.label >= self.num_classes {
                return Err(DataError::InvalidArgument(format!(
                    "instance {i} has label {} with {} classes",
                    inst.label, self.num_classes
                )));
            }
            if inst.values.len() != self.series_length {
                return Err(DataError::InvalidArgument(format!(
                    "instance {i} has length {}, dataset wants {}",
                    inst.values.len(),
                    self.series_length
                )));
            }
        }
        Ok(())
    }
}

/// Parses a delimited archive; see the module docs for the format.
///
/// Original labels may be arbitrary integers; they are remapped to 0..C-1
/// preserving their sorted order.
pub fn load_archive(path: &Path) -> Result<TimeSeriesDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_archive(&text, &name)
}

pub fn parse_archive(text: &str, name: &str) -> Result<TimeSeriesDataset, DataError> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.is_empty() {
        return Err(DataError::EmptyFile);
    }
    let delimiter = if rows[0].contains('\t') { '\t' } else { ',' };
    let mut raw_labels = Vec::with_capacity(rows.len());
    let mut series = Vec::with_capacity(rows.len());
    let mut width = None;
    for (row_idx, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(delimiter).collect();
        match width {
            None => {
                if fields.len() < 2 {
                    return Err(DataError::RaggedRow {
                        row: row_idx,
                        expected: 2,
                        got: fields.len(),
                    });
                }
                width = Some(fields.len());
            }
            Some(w) if fields.len() != w => {
                return Err(DataError::RaggedRow { row: row_idx, expected: w, got: fields.len() })
            }
            Some(_) => {}
        }
        let label_text = fields[0].trim();
        let label: i64 = match label_text.parse::<i64>() {
            Ok(v) => v,
            Err(_) => {
                // UCR files sometimes format labels as floats ("1.0000000e+00").
                let as_float: f64 = label_text.parse().map_err(|_| DataError::NonNumeric {
                    row: row_idx,
                    col: 0,
                    text: label_text.into(),
                })?;
                if as_float.fract() != 0.0 || !as_float.is_finite() {
                    return Err(DataError::BadLabel { row: row_idx, text: label_text.into() });
                }
                as_float as i64
            }
        };
        let mut values = Vec::with_capacity(fields.len() - 1);
        for (col, field) in fields.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| DataError::NonNumeric {
                row: row_idx,
                col,
                text: field.trim().into(),
            })?;
            values.push(v);
        }
        raw_labels.push(label);
        series.push(values);
    }
    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(DataError::TooFewClasses { found: distinct.len() });
    }
    let remap: BTreeMap<i64, usize> =
        distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let series_length = series[0].len();
    let instances = raw_labels
        .into_iter()
        .zip(series)
        .map(|(raw, values)| Instance { values, label: remap[&raw], prepared: false })
        .collect();
    let dataset = TimeSeriesDataset {
        instances,
        num_classes: distinct.len(),
        series_length,
        name: name.to_string(),
        split: Split::Train,
    };
    dataset.check_invariants()?;
    Ok(dataset)
}

/// Linear interpolation onto `target_len` evenly spaced positions, endpoints
/// preserved exactly.
pub fn resample_linear(values: &[f64], target_len: usize) -> Result<Vec<f64>, DataError> {
    if values.len() < 2 || target_len < 2 {
        return Err(DataError::InvalidArgument(format!(
            "resample needs lengths of at least 2, got {} -> {target_len}",
            values.len()
        )));
    }
    if values.len() == target_len {
        return Ok(values.to_vec());
    }
    let last = values.len() - 1;
    let step = last as f64 / (target_len - 1) as f64;
    let mut out = Vec::with_capacity(target_len);
    for j in 0..target_len {
        if j == target_len - 1 {
            out.push(values[last]);
            continue;
        }
        let pos = j as f64 * step;
        let i0 = (pos.floor() as usize).min(last - 1);
        let frac = pos - i0 as f64;
        out.push(values[i0] + frac * (values[i0 + 1] - values[i0]));
    }
    Ok(out)
}

/// Centers and scales to unit population standard deviation; constant series
/// (std below 1e-8) map to all zeros.
pub fn z_normalize(values: &[f64]) -> Result<Vec<f64>, DataError> {
    if values.is_empty() {
        return Err(DataError::InvalidArgument("z_normalize of empty series".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < CONSTANT_STD_FLOOR {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

/// Resamples every instance to `target_len` and z-normalizes it.
pub fn prepare(
    dataset: &TimeSeriesDataset,
    target_len: usize,
) -> Result<TimeSeriesDataset, DataError> {
    let mut out = dataset.clone();
    out.series_length = target_len;
    for inst in &mut out.instances {
        let resampled = resample_linear(&inst.values, target_len)?;
        inst.values = z_normalize(&resampled)?;
        inst.prepared = true;
    }
    out.check_invariants()?;
    Ok(out)
}

/// Result of a stratified split; warnings report classes too small to place
/// on both sides.
#[derive(Debug)]
pub struct SplitResult {
    pub train: TimeSeriesDataset,
    pub val: TimeSeriesDataset,
    pub warnings: Vec<String>,
}

/// Stratified, seeded train/validation split.
///
/// Each class contributes `round(val_fraction * n)` instances to validation,
/// clamped so neither side loses the class entirely; singleton classes stay
/// in train with a warning.
pub fn split_train_val(
    dataset: &TimeSeriesDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitResult, DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut warnings = Vec::new();
    let mut val_indices = Vec::new();
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> = dataset
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            warnings.push(format!(
                "class {class} has {} instance(s); kept entirely in train",
                members.len()
            ));
            continue;
        }
        let want = (val_fraction * members.len() as f64).round() as usize;
        let take = want.clamp(1, members.len() - 1);
        let mut rng = rng::stream(seed, &format!("split/class{class}"));
        members.shuffle(&mut rng);
        val_indices.extend(members.into_iter().take(take));
    }
    if val_indices.is_empty() {
        return Err(DataError::DegenerateSplit(
            "no class could contribute a validation instance".into(),
        ));
    }
    val_indices.sort_unstable();
    let in_val = |i: usize| val_indices.binary_search(&i).is_ok();
    let pick = |keep_val: bool, split: Split| {
        let instances: Vec<Instance> = dataset
            .instances
            .iter()
            .enumerate()
            .filter(|(i, _)| in_val(*i) == keep_val)
            .map(|(_, inst)| inst.clone())
            .collect();
        TimeSeriesDataset { instances, split, ..dataset.clone() }
    };
    let result = SplitResult {
        train: pick(false, Split::Train),
        val: pick(true, Split::Val),
        warnings,
    };
    result.train.check_invariants()?;
    result.val.check_invariants()?;
    Ok(result)
}

/// Synthetic cylinder/bell/funnel dataset.
///
/// Each instance places an event of random onset and duration on a unit-noise
/// floor: cylinders hold a plateau of height 6+η, bells ramp linearly up to
/// it, funnels decay linearly from it (η standard normal per instance).
pub fn generate_cbf(
    per_class: usize,
    length: usize,
    seed: u64,
) -> Result<TimeSeriesDataset, DataError> {
    if per_class < 1 {
        return Err(DataError::InvalidArgument("per_class must be at least 1".into()));
    }
    if length < 16 {
        return Err(DataError::InvalidArgument(format!(
            "length must be at least 16, got {length}"
        )));
    }
    let mut instances = Vec::with_capacity(3 * per_class);
    for class in 0..3usize {
        for i in 0..per_class {
            let mut rng = rng::stream(seed, &format!("cbf/class{class}/{i}"));
            let eta: f64 = StandardNormal.sample(&mut rng);
            let onset = rng.random_range(length / 8..=length / 4);
            let duration = rng.random_range(length / 4..=3 * length / 4);
            let end = onset + duration;
            let height = 6.0 + eta;
            let mut values = Vec::with_capacity(length);
            for t in 0..length {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let event = if t < onset || t >= end {
                    0.0
                } else {
                    let progress = (t - onset) as f64 / duration as f64;
                    match class {
                        0 => height,
                        1 => height * progress,
                        _ => height * (1.0 - progress),
                    }
                };
                values.push(event + noise);
            }
            instances.push(Instance { values, label: class, prepared: false });
        }
    }
    let dataset = TimeSeriesDataset {
        instances,
        num_classes: 3,
        series_length: length,
        name: "cbf".into(),
        split: Split::Train,
    };
    dataset.check_invariants()?;
    Ok(dataset)
}

/// Writes the archive (tab delimited) and a `.meta.json` sidecar.
pub fn export(dataset: &TimeSeriesDataset, path: &Path) -> Result<(), DataError> {
    dataset.check_invariants()?;
    let mut text = String::new();
    for inst in &dataset.instances {
        write!(text, "{}", inst.label).expect("string write");
        for v in &inst.values {
            write!(text, "\t{v:?}").expect("string write");
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    let meta = DatasetMeta {
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        series_length: dataset.series_length,
        num_instances: dataset.len(),
        split: dataset.split,
        prepared: dataset.instances.iter().all(|i| i.prepared),
    };
    let mut bytes = serde_json::to_vec_pretty(&meta)?;
    bytes.push(b'\n');
    write_atomic(&sidecar_path(path), &bytes)?;
    Ok(())
}

/// Path of the metadata sidecar for an exported archive.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.push_str(".meta.json");
    path.with_file_name(name)
}
