//! Datasets, partitioning across two owners, and classification metrics.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::MlpModel;
use crate::rng::substream;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `n × d_in`, values in `[0, 1]`.
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim("dataset labels", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} outside class_count {class_count}"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    /// Seeded random subset of `n` rows (the whole set if `n >= len`).
    pub fn sample(&self, n: usize, seed: u64) -> LabeledDataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut substream(seed, "sample", 0));
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Probe rows drawn round-robin across classes so every class present is
    /// represented as evenly as `n` allows.
    pub fn stratified_probe(&self, n: usize, seed: u64) -> Result<Matrix> {
        if n == 0 || self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut by = self.indices_by_class();
        for (c, idx) in by.iter_mut().enumerate() {
            idx.shuffle(&mut substream(seed, "probe", c as u64));
        }
        let mut picked = Vec::with_capacity(n);
        let mut round = 0;
        while picked.len() < n.min(self.len()) {
            for idx in &by {
                if let Some(&i) = idx.get(round) {
                    picked.push(i);
                    if picked.len() == n {
                        break;
                    }
                }
            }
            round += 1;
        }
        Ok(self.inputs.select_rows(&picked))
    }
}

fn read_u32_be(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Malformed {
            what,
            detail: "truncated header".into(),
        })
}

/// Parses an IDX image/label file pair (big-endian headers, one byte per pixel).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut images)?;
    let mut labels = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut labels)?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = read_u32_be(images, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Malformed {
            what: "IDX images",
            detail: format!("magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        });
    }
    let n = read_u32_be(images, 4, "IDX images")? as usize;
    let rows = read_u32_be(images, 8, "IDX images")? as usize;
    let cols = read_u32_be(images, 12, "IDX images")? as usize;

    let magic = read_u32_be(labels, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Malformed {
            what: "IDX labels",
            detail: format!("magic {magic}, expected {IDX_LABELS_MAGIC}"),
        });
    }
    let n_labels = read_u32_be(labels, 4, "IDX labels")? as usize;
    if n != n_labels {
        return Err(Error::Malformed {
            what: "IDX pair",
            detail: format!("{n} images but {n_labels} labels"),
        });
    }
    let d = rows * cols;
    let pixels = images.get(16..16 + n * d).ok_or_else(|| Error::Malformed {
        what: "IDX images",
        detail: format!("truncated: need {} pixel bytes", n * d),
    })?;
    let label_bytes = labels.get(8..8 + n).ok_or_else(|| Error::Malformed {
        what: "IDX labels",
        detail: format!("truncated: need {n} label bytes"),
    })?;
    let inputs = Matrix::from_vec(n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledDataset::new(inputs, labels, class_count)
}

/// Encodes images (values in [0,1], rounded to bytes) and labels as an IDX pair.
pub fn encode_idx(data: &LabeledDataset, rows: u32, cols: u32) -> Result<(Vec<u8>, Vec<u8>)> {
    if (rows * cols) as usize != data.input_dim() {
        return Err(Error::dim("IDX image size", data.input_dim(), (rows * cols) as usize));
    }
    let n = data.len() as u32;
    let mut img = Vec::with_capacity(16 + data.inputs.as_slice().len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    img.extend(data.inputs.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

/// Gaussian clusters around seeded uniform centers in `[0,1]^d_in`, clamped to
/// `[0,1]`. Samples are ordered class by class.
pub fn synth_blobs(
    class_count: usize,
    per_class: usize,
    d_in: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count == 0 || per_class == 0 || d_in == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be finite and non-negative"));
    }
    let mut centers = substream(seed, "blob-centers", 0);
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..d_in).map(|_| centers.gen::<f64>()).collect())
        .collect();
    let mut data = Vec::with_capacity(class_count * per_class * d_in);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for (c, center) in centers.iter().enumerate() {
        let mut rng = substream(seed, "blob-points", c as u64);
        for _ in 0..per_class {
            for &mu in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push((mu + spread * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(
        Matrix::from_vec(class_count * per_class, d_in, data)?,
        labels,
        class_count,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Homogeneous,
    Heterogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub kind: PartitionKind,
    pub personalized_label: usize,
    pub minority_fraction: f64,
}

impl PartitionPlan {
    pub fn homogeneous() -> Self {
        Self {
            kind: PartitionKind::Homogeneous,
            personalized_label: 4,
            minority_fraction: 0.2,
        }
    }

    pub fn heterogeneous(personalized_label: usize) -> Self {
        Self {
            kind: PartitionKind::Heterogeneous,
            personalized_label,
            minority_fraction: 0.2,
        }
    }
}

/// Index sets of the two shards, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionIndices {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

pub fn partition_indices(data: &LabeledDataset, plan: &PartitionPlan, seed: u64) -> Result<PartitionIndices> {
    let mut by = data.indices_by_class();
    for (c, idx) in by.iter_mut().enumerate() {
        idx.shuffle(&mut substream(seed, "partition", c as u64));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    match plan.kind {
        PartitionKind::Homogeneous => {
            // odd-sized classes alternate which side gets the extra sample
            let mut extra_to_a = true;
            for idx in &by {
                let half = idx.len() / 2;
                let cut = if idx.len() % 2 == 1 {
                    let c = if extra_to_a { half + 1 } else { half };
                    extra_to_a = !extra_to_a;
                    c
                } else {
                    half
                };
                a.extend_from_slice(&idx[..cut]);
                b.extend_from_slice(&idx[cut..]);
            }
        }
        PartitionKind::Heterogeneous => {
            let label = plan.personalized_label;
            if label >= data.class_count {
                return Err(Error::invalid(format!(
                    "personalized label {label} outside class_count {}",
                    data.class_count
                )));
            }
            if !(plan.minority_fraction > 0.0 && plan.minority_fraction < 1.0) {
                return Err(Error::invalid("minority_fraction must lie in (0, 1)"));
            }
            if by[label].is_empty() {
                return Err(Error::invalid(format!(
                    "personalized label {label} absent from data"
                )));
            }
            a.extend_from_slice(&by[label]);
            let mut rest: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != label).collect();
            rest.shuffle(&mut substream(seed, "partition-rest", 0));
            let take = (plan.minority_fraction * rest.len() as f64).round() as usize;
            a.extend_from_slice(&rest[..take]);
            b.extend_from_slice(&rest[take..]);
        }
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok(PartitionIndices { a, b })
}

/// Splits `data` into the shards of user A and user B.
pub fn partition(data: &LabeledDataset, plan: &PartitionPlan, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let idx = partition_indices(data, plan, seed)?;
    Ok((data.subset(&idx.a), data.subset(&idx.b)))
}

pub const METRIC_COLUMNS: [&str; 7] = ["acc", "ma_f1", "w_f1", "ma_rec", "w_rec", "ma_prec", "w_prec"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub ma_f1: f64,
    pub w_f1: f64,
    pub ma_rec: f64,
    pub w_rec: f64,
    pub ma_prec: f64,
    pub w_prec: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.acc,
            self.ma_f1,
            self.w_f1,
            self.ma_rec,
            self.w_rec,
            self.ma_prec,
            self.w_prec,
        ]
    }

    pub fn csv_header() -> String {
        METRIC_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// `confusion[true][pred]` counts.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], class_count: usize) -> Vec<Vec<u64>> {
    let mut cm = vec![vec![0u64; class_count]; class_count];
    for (&p, &t) in predicted.iter().zip(labels) {
        cm[t][p] += 1;
    }
    cm
}

/// Per-class precision/recall/F1 reduced to macro and support-weighted means.
///
/// Macro means run over all classes, with zero-support classes contributing 0.
/// Weighted means use class support as weights, so zero-support classes drop out.
pub fn metrics_from_confusion(cm: &[Vec<u64>]) -> MetricReport {
    let k = cm.len();
    let total: u64 = cm.iter().flatten().sum();
    if total == 0 {
        return MetricReport {
            acc: 0.0,
            ma_f1: 0.0,
            w_f1: 0.0,
            ma_rec: 0.0,
            w_rec: 0.0,
            ma_prec: 0.0,
            w_prec: 0.0,
        };
    }
    let correct: u64 = (0..k).map(|c| cm[c][c]).sum();
    let (mut ma_p, mut ma_r, mut ma_f) = (0.0, 0.0, 0.0);
    let (mut w_p, mut w_r, mut w_f) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let support: u64 = cm[c].iter().sum();
        if support == 0 {
            continue;
        }
        let predicted: u64 = (0..k).map(|t| cm[t][c]).sum();
        let tp = cm[c][c] as f64;
        let prec = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let rec = tp / support as f64;
        let f1 = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        ma_p += prec;
        ma_r += rec;
        ma_f += f1;
        let w = support as f64 / total as f64;
        w_p += w * prec;
        w_r += w * rec;
        w_f += w * f1;
    }
    let kf = k as f64;
    MetricReport {
        acc: correct as f64 / total as f64,
        ma_f1: ma_f / kf,
        w_f1: w_f,
        ma_rec: ma_r / kf,
        w_rec: w_r,
        ma_prec: ma_p / kf,
        w_prec: w_p,
    }
}

pub fn metrics_from_predictions(predicted: &[usize], labels: &[usize], class_count: usize) -> MetricReport {
    metrics_from_confusion(&confusion_matrix(predicted, labels, class_count))
}

pub fn evaluate(model: &MlpModel, data: &LabeledDataset) -> Result<MetricReport> {
    let pred = model.predict(&data.inputs)?;
    Ok(metrics_from_predictions(&pred, &data.labels, data.class_count))
}
