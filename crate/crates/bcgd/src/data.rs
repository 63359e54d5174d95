//! Dataset synthesis and parsing, metrics persistence, run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::{normal_vec, stream_rng, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic in {field}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { path: String, field: String, expected: u32, got: u32 },
    #[error("{path}: truncated while reading {field}")]
    Truncated { path: String, field: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("duplicate config key '{0}'")]
    DuplicateKey(String),
    #[error("unknown config key '{key}'; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("config key '{key}': cannot parse '{value}'")]
    BadValue { key: String, value: String },
    #[error("metrics record out of order: ({0}, {1}) after ({2}, {3})")]
    OutOfOrder(usize, usize, usize, usize),
    #[error("metrics record has wrong arity: {0}")]
    BadRecord(String),
}

#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub name: String,
    pub feature_count: usize,
    pub class_count: usize,
    pub normalization: String,
}

/// Immutable dataset: row-major inputs with one class label per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Deterministic 80/20 split by index.
    pub fn split_train_val(&self) -> (Dataset, Dataset) {
        let cut = self.len() * 4 / 5;
        (self.take(0..cut), self.take(cut..self.len()))
    }

    fn take(&self, range: std::ops::Range<usize>) -> Dataset {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(range.len() * cols);
        for r in range.clone() {
            data.extend_from_slice(self.inputs.row(r));
        }
        Dataset {
            inputs: Matrix::from_vec(range.len(), cols, data),
            labels: self.labels[range].to_vec(),
            meta: self.meta.clone(),
        }
    }

    /// Rows selected by index, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        (Matrix::from_vec(indices.len(), cols, data), labels)
    }
}

/// Gaussian blobs with class means on a scaled axis simplex and unit noise,
/// standardized per feature.
pub fn gen_gaussian_blobs(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(DataError::InvalidConfig("counts must be positive".into()));
    }
    if n_classes > n_samples {
        return Err(DataError::InvalidConfig(format!(
            "{n_classes} classes cannot be drawn from {n_samples} samples"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let mut data = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        let noise = normal_vec(&mut rng, n_features);
        for (f, &z) in noise.iter().enumerate() {
            let mean = if f == class % n_features { separation } else { 0.0 };
            data.push(mean + z);
        }
        labels.push(class);
    }

    // per-feature standardization
    let n = n_samples as f64;
    for f in 0..n_features {
        let mut mean = 0.0;
        for i in 0..n_samples {
            mean += data[i * n_features + f];
        }
        mean /= n;
        let mut var = 0.0;
        for i in 0..n_samples {
            let d = data[i * n_features + f] - mean;
            var += d * d;
        }
        let std = (var / n).sqrt().max(1e-12);
        for i in 0..n_samples {
            let x = &mut data[i * n_features + f];
            *x = (*x - mean) / std;
        }
    }

    Ok(Dataset {
        inputs: Matrix::from_vec(n_samples, n_features, data),
        labels,
        meta: DatasetMeta {
            name: "blobs".into(),
            feature_count: n_features,
            class_count: n_classes,
            normalization: "standardized".into(),
        },
    })
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &str, field: &str) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated { path: path.into(), field: field.into() });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Loads an IDX u8 image tensor and its label file; pixels are scaled to
/// [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let read_all = |p: &Path| -> Result<Vec<u8>, DataError> {
        fs::read(p).map_err(|source| DataError::Io { path: p.display().to_string(), source })
    };
    let img_bytes = read_all(images_path)?;
    let img_path = images_path.display().to_string();

    let magic = read_be_u32(&img_bytes, 0, &img_path, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: img_path,
            field: "image magic".into(),
            expected: IDX_IMAGE_MAGIC,
            got: magic,
        });
    }
    let count = read_be_u32(&img_bytes, 4, &img_path, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, 8, &img_path, "image rows")? as usize;
    let cols = read_be_u32(&img_bytes, 12, &img_path, "image cols")? as usize;
    let pixels = count * rows * cols;
    if img_bytes.len() < 16 + pixels {
        return Err(DataError::Truncated { path: img_path, field: "image pixels".into() });
    }

    let lbl_bytes = read_all(labels_path)?;
    let lbl_path = labels_path.display().to_string();
    let magic = read_be_u32(&lbl_bytes, 0, &lbl_path, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: lbl_path,
            field: "label magic".into(),
            expected: IDX_LABEL_MAGIC,
            got: magic,
        });
    }
    let label_count = read_be_u32(&lbl_bytes, 4, &lbl_path, "label count")? as usize;
    if lbl_bytes.len() < 8 + label_count {
        return Err(DataError::Truncated { path: lbl_path, field: "label bytes".into() });
    }
    if label_count != count {
        return Err(DataError::CountMismatch { images: count, labels: label_count });
    }

    let data: Vec<f64> = img_bytes[16..16 + pixels].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + label_count].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        inputs: Matrix::from_vec(count, rows * cols, data),
        labels,
        meta: DatasetMeta {
            name: "idx".into(),
            feature_count: rows * cols,
            class_count,
            normalization: "divided by 255".into(),
        },
    })
}

/// One per-epoch metrics record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub alphas: Vec<f64>,
    pub shadow_dists: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// Append-only per-run metrics with a fixed column layout.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    layer_count: usize,
    alpha_count: usize,
    records: Vec<MetricsRecord>,
}

impl RunMetrics {
    pub fn new(layer_count: usize, alpha_count: usize) -> Self {
        RunMetrics { layer_count, alpha_count, records: Vec::new() }
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<(), DataError> {
        if record.alphas.len() != self.alpha_count
            || record.shadow_dists.len() != self.layer_count
            || record.grad_norms.len() != self.layer_count
        {
            return Err(DataError::BadRecord(format!(
                "expected {} alphas and {} per-layer columns",
                self.alpha_count, self.layer_count
            )));
        }
        if let Some(last) = self.records.last() {
            if (record.epoch, record.iteration) < (last.epoch, last.iteration) {
                return Err(DataError::OutOfOrder(
                    record.epoch,
                    record.iteration,
                    last.epoch,
                    last.iteration,
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["epoch".to_string(), "iteration".into(), "train_loss".into(), "train_acc".into(), "val_acc".into()];
        for i in 0..self.alpha_count {
            cols.push(format!("alpha_{i}"));
        }
        for i in 0..self.layer_count {
            cols.push(format!("wdist_{i}"));
        }
        for i in 0..self.layer_count {
            cols.push(format!("gnorm_{i}"));
        }
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.records {
            let mut fields = vec![
                r.epoch.to_string(),
                r.iteration.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.val_acc.to_string(),
            ];
            fields.extend(r.alphas.iter().map(f64::to_string));
            fields.extend(r.shadow_dists.iter().map(f64::to_string));
            fields.extend(r.grad_norms.iter().map(f64::to_string));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_csv())
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    /// Parses a CSV produced by [`RunMetrics::to_csv`].
    pub fn parse_csv(text: &str) -> Result<RunMetrics, DataError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DataError::BadRecord("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let alpha_count = cols.iter().filter(|c| c.starts_with("alpha_")).count();
        let layer_count = cols.iter().filter(|c| c.starts_with("wdist_")).count();
        let mut metrics = RunMetrics::new(layer_count, alpha_count);
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 + alpha_count + 2 * layer_count {
                return Err(DataError::BadRecord(line.into()));
            }
            let parse =
                |s: &str| s.parse::<f64>().map_err(|_| DataError::BadRecord(line.to_string()));
            let parse_u =
                |s: &str| s.parse::<usize>().map_err(|_| DataError::BadRecord(line.to_string()));
            let record = MetricsRecord {
                epoch: parse_u(f[0])?,
                iteration: parse_u(f[1])?,
                train_loss: parse(f[2])?,
                train_acc: parse(f[3])?,
                val_acc: parse(f[4])?,
                alphas: f[5..5 + alpha_count].iter().map(|s| parse(s)).collect::<Result<_, _>>()?,
                shadow_dists: f[5 + alpha_count..5 + alpha_count + layer_count]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<_, _>>()?,
                grad_norms: f[5 + alpha_count + layer_count..]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<_, _>>()?,
            };
            metrics.push(record)?;
        }
        Ok(metrics)
    }
}

/// The complete set of recognized run-configuration keys.
pub const CONFIG_KEYS: [&str; 14] = [
    "bits_w",
    "bits_a",
    "variant",
    "rho",
    "lr",
    "rate_factor",
    "momentum",
    "weight_decay",
    "milestones",
    "decay",
    "epochs",
    "batch_size",
    "seed",
    "keep_ends_float",
];

/// Parses a `key = value` config file with `#` comments. Unknown and
/// duplicate keys fail fast.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>, DataError> {
    let text = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, DataError> {
    let mut map = BTreeMap::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(DataError::InvalidConfig(format!("expected 'key = value', got '{raw}'")));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(DataError::UnknownKey { key, valid: CONFIG_KEYS.join(", ") });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(DataError::DuplicateKey(key));
        }
    }
    Ok(map)
}
