//! Per-client labeled activity streams: a synthetic generator with
//! dwell-structured labels, sliding-window segmentation, and a CSV ingestion
//! hook for real recordings.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// One client's raw sensor stream: a feature vector and an activity label per
/// timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStream {
    pub client_id: String,
    pub sample_rate_hz: u32,
    pub class_count: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl LabeledStream {
    pub fn new(
        client_id: impl Into<String>,
        sample_rate_hz: u32,
        class_count: usize,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Size("stream must contain at least one sample".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::Size(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::Size("feature vectors must share a nonzero dimension".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Index {
                index: bad,
                len: class_count,
            });
        }
        Ok(Self {
            client_id: client_id.into(),
            sample_rate_hz,
            class_count,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// A segmented stream: fixed-length windows with one label each.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub window_length: usize,
    pub overlap_fraction: f64,
    pub feature_dim: usize,
    pub class_count: usize,
}

/// One sliding window: features as a `feature_dim x window_length` matrix.
#[derive(Clone, Debug)]
pub struct Window {
    pub features: Matrix,
    pub label: usize,
    pub start_index: usize,
}

impl Window {
    /// Row-major flattening (all timesteps of feature 0, then feature 1, ...).
    pub fn flat_features(&self) -> &[f64] {
        self.features.data()
    }
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Flattened input dimension seen by the classifier.
    pub fn input_dim(&self) -> usize {
        self.feature_dim * self.window_length
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.label).collect()
    }
}

/// Per-class signal model: feature mean and isotropic noise scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassSignal {
    pub mean: Vec<f64>,
    pub noise_scale: f64,
}

/// Declarative description of a synthetic activity stream.
///
/// Labels follow a dwell process: each activity run lasts a geometrically
/// distributed number of samples with mean `mean_dwell_windows[k] *
/// samples_per_window`, and the next run's class is drawn from the
/// dwell-corrected prior (`class_prior[k] / dwell_k`), excluding the class
/// that just ended. Sample-level class frequencies then match `class_prior`
/// exactly when the dwell-corrected weights are uniform -- e.g. whenever
/// dwell means are proportional to the prior, the natural "majority classes
/// dwell longer" regime -- and approximately otherwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamSpec {
    pub class_count: usize,
    pub feature_dim: usize,
    /// Target sample-level class distribution; index 0 is conventionally the
    /// NULL class. Must sum to 1.
    pub class_prior: Vec<f64>,
    /// Mean activity dwell per class, in units of `samples_per_window`
    /// samples. Must be >= 1.
    pub mean_dwell_windows: Vec<f64>,
    /// Number of samples in one dwell unit (typically the window length).
    #[serde(default = "default_samples_per_window")]
    pub samples_per_window: usize,
    pub class_signal: Vec<ClassSignal>,
    /// Stream length in samples.
    pub length: usize,
}

fn default_samples_per_window() -> usize {
    50
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Size("stream length must be positive".into()));
        }
        if self.class_count == 0 || self.feature_dim == 0 || self.samples_per_window == 0 {
            return Err(Error::Size("class_count, feature_dim, samples_per_window must be positive".into()));
        }
        if self.class_prior.len() != self.class_count
            || self.mean_dwell_windows.len() != self.class_count
            || self.class_signal.len() != self.class_count
        {
            return Err(Error::Size(format!(
                "per-class fields must have length {}",
                self.class_count
            )));
        }
        let sum: f64 = self.class_prior.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_prior.iter().any(|p| *p < 0.0) {
            return Err(Error::Domain(format!("class prior must sum to 1, got {sum}")));
        }
        if self.mean_dwell_windows.iter().any(|d| *d < 1.0) {
            return Err(Error::Domain("mean dwell must be >= 1 window".into()));
        }
        if self
            .class_signal
            .iter()
            .any(|s| s.mean.len() != self.feature_dim || s.noise_scale < 0.0)
        {
            return Err(Error::Size("class signal dims must match feature_dim".into()));
        }
        Ok(())
    }

    fn dwell_samples(&self, class: usize) -> f64 {
        self.mean_dwell_windows[class] * self.samples_per_window as f64
    }
}

/// Generate one client's stream from a spec; deterministic under the seed.
pub fn generate_stream(
    spec: &StreamSpec,
    client_id: impl Into<String>,
    sample_rate_hz: u32,
    rng: &mut SeededRng,
) -> Result<LabeledStream> {
    spec.validate()?;

    // Run-start weights corrected for dwell length so that long-dwelling
    // classes do not dominate the sample-level distribution.
    let weights: Vec<f64> = (0..spec.class_count)
        .map(|k| spec.class_prior[k] / spec.dwell_samples(k))
        .collect();

    let mut labels = Vec::with_capacity(spec.length);
    let mut current = draw_weighted(&weights, None, rng)
        .ok_or_else(|| Error::Domain("class prior has no positive entry".into()))?;
    while labels.len() < spec.length {
        let run = geometric_run_length(spec.dwell_samples(current), rng);
        for _ in 0..run {
            if labels.len() == spec.length {
                break;
            }
            labels.push(current);
        }
        // Next run excludes the current class so observed run lengths stay
        // geometric with the configured mean.
        current = draw_weighted(&weights, Some(current), rng).unwrap_or(current);
    }

    let mut features = Vec::with_capacity(spec.length);
    for &label in &labels {
        let signal = &spec.class_signal[label];
        let row: Vec<f64> = signal
            .mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + signal.noise_scale * z
            })
            .collect();
        features.push(row);
    }

    LabeledStream::new(client_id, sample_rate_hz, spec.class_count, features, labels)
}

/// Geometric run length on {1, 2, ...} with the given mean.
fn geometric_run_length(mean: f64, rng: &mut SeededRng) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let u: f64 = rng.random_range(0.0..1.0);
    let len = ((1.0 - u).ln() / (1.0 - p).ln()).ceil();
    len.max(1.0) as usize
}

fn draw_weighted(weights: &[f64], exclude: Option<usize>, rng: &mut SeededRng) -> Option<usize> {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != exclude)
        .map(|(_, w)| *w)
        .sum();
    if total <= 0.0 {
        return None;
    }
    let mut point = rng.random_range(0.0..total);
    for (k, &w) in weights.iter().enumerate() {
        if Some(k) == exclude || w <= 0.0 {
            continue;
        }
        if point < w {
            return Some(k);
        }
        point -= w;
    }
    weights
        .iter()
        .enumerate()
        .filter(|(k, w)| Some(*k) != exclude && **w > 0.0)
        .map(|(k, _)| k)
        .next_back()
}

/// Segment a stream into fixed-length windows.
///
/// The stride is `window_length * (1 - overlap)` (rounded, minimum 1) and the
/// truncated tail is dropped. Each window's label is the majority label of
/// its samples; ties go to the label of the last sample in the window.
pub fn sliding_windows(
    stream: &LabeledStream,
    window_length: usize,
    overlap_fraction: f64,
) -> Result<WindowSet> {
    if window_length == 0 || window_length > stream.len() {
        return Err(Error::Size(format!(
            "window length {window_length} invalid for stream of {} samples",
            stream.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Domain(format!(
            "overlap fraction {overlap_fraction} must lie in [0, 1)"
        )));
    }
    let stride = ((window_length as f64 * (1.0 - overlap_fraction)).round() as usize).max(1);
    let dim = stream.feature_dim();

    let mut windows = Vec::new();
    let mut start = 0;
    while start + window_length <= stream.len() {
        let slice_labels = &stream.labels()[start..start + window_length];
        let label = majority_label(slice_labels, stream.class_count);

        let mut data = vec![0.0; dim * window_length];
        for (t, sample) in stream.features()[start..start + window_length].iter().enumerate() {
            for (d, &v) in sample.iter().enumerate() {
                data[d * window_length + t] = v;
            }
        }
        windows.push(Window {
            features: Matrix::new(dim, window_length, data)?,
            label,
            start_index: start,
        });
        start += stride;
    }

    Ok(WindowSet {
        windows,
        window_length,
        overlap_fraction,
        feature_dim: dim,
        class_count: stream.class_count,
    })
}

fn majority_label(labels: &[usize], class_count: usize) -> usize {
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        counts[l] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let tied = counts.iter().filter(|&&c| c == max).count();
    if tied > 1 {
        *labels.last().expect("windows are non-empty")
    } else {
        counts.iter().position(|&c| c == max).expect("max exists")
    }
}

/// Column mapping and label dictionary for CSV streams. The label dictionary
/// must map label strings onto contiguous class indices `0..K`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub feature_columns: Vec<String>,
    pub label_dict: BTreeMap<String, usize>,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: u32,
}

fn default_sample_rate() -> u32 {
    50
}

impl CsvSchema {
    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::Schema("schema needs at least one feature column".into()));
        }
        if self.feature_columns.contains(&self.label_column) {
            return Err(Error::Schema(format!(
                "label column {:?} also listed as a feature",
                self.label_column
            )));
        }
        let mut indices: Vec<usize> = self.label_dict.values().copied().collect();
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() || indices != (0..indices.len()).collect::<Vec<_>>() {
            return Err(Error::Schema(
                "label dictionary must cover contiguous class indices 0..K".into(),
            ));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.label_dict
            .values()
            .copied()
            .max()
            .map_or(0, |m| m + 1)
    }

    fn inverse_dict(&self) -> Vec<&str> {
        let mut names = vec![""; self.class_count()];
        for (name, &idx) in &self.label_dict {
            names[idx] = name.as_str();
        }
        names
    }
}

/// Load a stream from CSV; the client id is the file stem.
pub fn load_csv_stream(path: &Path, schema: &CsvSchema) -> Result<LabeledStream> {
    schema.validate()?;
    let client_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("client")
        .to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => {
            Error::io(path, std::io::Error::other(e.to_string()))
        }
        _ => Error::Schema(e.to_string()),
    })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(e.to_string()))?
        .clone();
    let column_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column {name:?} missing from header")))
    };
    let label_idx = column_index(&schema.label_column)?;
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| column_index(c))
        .collect::<Result<_>>()?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row_number, record) in reader.records().enumerate() {
        // 1-based data row counting the header line.
        let row = row_number + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row,
            message: e.to_string(),
        })?;
        let mut feats = Vec::with_capacity(feature_idx.len());
        for &idx in &feature_idx {
            let cell = record.get(idx).unwrap_or("");
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                message: format!("non-numeric feature cell {cell:?}"),
            })?;
            feats.push(value);
        }
        let label_cell = record.get(label_idx).unwrap_or("");
        let label = *schema.label_dict.get(label_cell).ok_or_else(|| {
            Error::Schema(format!("unknown label {label_cell:?} at row {row}"))
        })?;
        features.push(feats);
        labels.push(label);
    }

    if features.is_empty() {
        return Err(Error::Size(format!(
            "{}: no data rows after the header",
            path.display()
        )));
    }
    LabeledStream::new(
        client_id,
        schema.sample_rate_hz,
        schema.class_count(),
        features,
        labels,
    )
}

/// Write a stream to CSV using the schema's column order (features, then the
/// label column). Floats round-trip exactly through [`load_csv_stream`].
pub fn write_csv_stream(stream: &LabeledStream, path: &Path, schema: &CsvSchema) -> Result<()> {
    schema.validate()?;
    if schema.feature_columns.len() != stream.feature_dim() {
        return Err(Error::Schema(format!(
            "schema names {} feature columns but stream has dimension {}",
            schema.feature_columns.len(),
            stream.feature_dim()
        )));
    }
    if schema.class_count() < stream.class_count {
        return Err(Error::Schema(format!(
            "label dictionary covers {} classes but stream declares {}",
            schema.class_count(),
            stream.class_count
        )));
    }
    let names = schema.inverse_dict();
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::io(path, std::io::Error::other(e.to_string()))
    })?;
    let mut header: Vec<&str> = schema.feature_columns.iter().map(String::as_str).collect();
    header.push(&schema.label_column);
    writer
        .write_record(&header)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    let mut cells: Vec<String> = Vec::new();
    for (feats, &label) in stream.features().iter().zip(stream.labels()) {
        cells.clear();
        cells.extend(feats.iter().map(|v| v.to_string()));
        cells.push(names[label].to_string());
        writer
            .write_record(&cells)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
