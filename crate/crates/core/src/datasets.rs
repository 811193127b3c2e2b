//! Synthetic blobs, labeled CSV ingestion, stratified splits and scaling.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AgtError, Result};
use crate::nn::LabeledExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Blobs,
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    "label".into()
}

/// Where the data comes from and how it is split. The blob parameters are
/// ignored for CSV sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default)]
    pub n_samples: usize,
    #[serde(default)]
    pub n_features: usize,
    #[serde(default)]
    pub class_separation: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    pub seed: u64,
    pub split_fraction: f64,
    /// Min-max scale features to [0, 1] using the training split's range.
    #[serde(default)]
    pub min_max_scale: bool,
}

fn default_noise_sd() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn blobs(
        n_samples: usize,
        n_features: usize,
        class_separation: f64,
        noise_sd: f64,
        seed: u64,
    ) -> Self {
        Self {
            source: DataSource::Blobs,
            n_samples,
            n_features,
            class_separation,
            noise_sd,
            seed,
            split_fraction: 0.8,
            min_max_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(AgtError::config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.source == DataSource::Blobs {
            if self.n_samples < 2 {
                return Err(AgtError::config("blobs need at least 2 samples"));
            }
            if self.n_features == 0 {
                return Err(AgtError::config("blobs need at least 1 feature"));
            }
            if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
                return Err(AgtError::config(format!(
                    "noise_sd must be positive, got {}",
                    self.noise_sd
                )));
            }
            if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
                return Err(AgtError::config(format!(
                    "class_separation must be non-negative, got {}",
                    self.class_separation
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n_features: usize,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(n_features: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.x.len() != n_features) {
            return Err(AgtError::dim(format!(
                "example has {} features, dataset has {n_features}",
                e.x.len()
            )));
        }
        Ok(Self {
            n_features,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// One more than the largest label, or 0 when empty.
    pub fn n_classes(&self) -> usize {
        self.examples.iter().map(|e| e.y + 1).max().unwrap_or(0)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for e in &self.examples {
            counts[e.y] += 1;
        }
        counts
    }

    pub fn features(&self) -> Vec<Array1<f64>> {
        self.examples.iter().map(|e| e.x.clone()).collect()
    }
}

/// Two isotropic Gaussian clusters centred at `±(sep/2)·u`, with `u` the unit
/// diagonal, then a stratified train/test split.
pub fn make_blobs(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if spec.source != DataSource::Blobs {
        return Err(AgtError::config("make_blobs needs a blobs source"));
    }
    let d = spec.n_features;
    let offset = spec.class_separation / 2.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n_samples)
        .map(|i| usize::from(i >= spec.n_samples / 2))
        .collect();
    labels.shuffle(&mut rng);
    let examples = labels
        .into_iter()
        .map(|y| {
            let centre = if y == 0 { -offset } else { offset };
            let x = Array1::from_shape_fn(d, |_| {
                centre + spec.noise_sd * rng.sample::<f64, _>(StandardNormal)
            });
            LabeledExample::new(x, y)
        })
        .collect();
    let all = Dataset::new(d, examples)?;
    let (train, test) = stratified_split(&all, spec.split_fraction, spec.seed.wrapping_add(1))?;
    Ok(maybe_scale(train, test, spec.min_max_scale))
}

/// Per class, a seeded `fraction` of the examples go to train and the rest
/// to test. Original order is kept within each side.
pub fn stratified_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AgtError::config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; data.len()];
    for class in 0..data.n_classes() {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.examples[i].y == class)
            .collect();
        idx.shuffle(&mut rng);
        let n_train = (fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, t) in data.examples.iter().zip(in_train) {
        if t { &mut train } else { &mut test }.push(e.clone());
    }
    Ok((
        Dataset::new(data.n_features, train)?,
        Dataset::new(data.n_features, test)?,
    ))
}

/// Per-feature affine map onto [0, 1] fitted on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Array1<f64>,
    pub max: Array1<f64>,
}

impl MinMaxScaler {
    pub fn fit(data: &Dataset) -> Self {
        let d = data.n_features;
        let mut min = Array1::from_elem(d, f64::INFINITY);
        let mut max = Array1::from_elem(d, f64::NEG_INFINITY);
        for e in &data.examples {
            min.zip_mut_with(&e.x, |m, &v| *m = m.min(v));
            max.zip_mut_with(&e.x, |m, &v| *m = m.max(v));
        }
        Self { min, max }
    }

    /// Constant features map to 0.
    pub fn transform(&self, data: &Dataset) -> Dataset {
        let examples = data
            .examples
            .iter()
            .map(|e| {
                let x = ndarray::Zip::from(&e.x)
                    .and(&self.min)
                    .and(&self.max)
                    .map_collect(|&v, &lo, &hi| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
                LabeledExample::new(x, e.y)
            })
            .collect();
        Dataset {
            n_features: data.n_features,
            examples,
        }
    }
}

fn maybe_scale(train: Dataset, test: Dataset, scale: bool) -> (Dataset, Dataset) {
    if !scale || train.is_empty() {
        return (train, test);
    }
    let scaler = MinMaxScaler::fit(&train);
    (scaler.transform(&train), scaler.transform(&test))
}

/// A parsed CSV file and how many rows were dropped for non-finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvLoad {
    pub dataset: Dataset,
    pub skipped_nonfinite: usize,
}

/// Reads a comma-separated file with a header row. Every column other than
/// `label_column` is a numeric feature.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<CsvLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| AgtError::Parse {
            line: 1,
            message: format!("no column named {label_column:?}"),
        })?;
    let n_features = headers.len() - 1;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| AgtError::Parse { line, message };
        let raw_label = record[label_idx].trim();
        let y: usize = raw_label
            .parse()
            .map_err(|_| parse_err(format!("label {raw_label:?} is not a non-negative integer")))?;
        let mut x = Vec::with_capacity(n_features);
        for (i, field) in record.iter().enumerate().filter(|&(i, _)| i != label_idx) {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(format!(
                    "column {:?}: {field:?} is not a number",
                    &headers[i]
                ))
            })?;
            x.push(v);
        }
        if x.iter().all(|v| v.is_finite()) {
            examples.push(LabeledExample::new(x, y));
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!(
            "skipped {skipped} rows with NaN or infinite features in {}",
            path.as_ref().display()
        );
    }
    Ok(CsvLoad {
        dataset: Dataset::new(n_features, examples)?,
        skipped_nonfinite: skipped,
    })
}

/// Writes features as `x0..x{d-1}` followed by `label_column`. Values use the
/// shortest representation that round-trips.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.n_features).map(|i| format!("x{i}")).collect();
    header.push(label_column.to_string());
    writer.write_record(&header)?;
    for e in &data.examples {
        let mut row: Vec<String> = e.x.iter().map(|v| v.to_string()).collect();
        row.push(e.y.to_string());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads or generates the train/test split described by `spec`.
pub fn load(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    match &spec.source {
        DataSource::Blobs => make_blobs(spec),
        DataSource::Csv { path, label_column } => {
            let loaded = load_csv(path, label_column)?;
            let (train, test) = stratified_split(&loaded.dataset, spec.split_fraction, spec.seed)?;
            Ok(maybe_scale(train, test, spec.min_max_scale))
        }
    }
}
