//! Synthetic Gaussian-mixture datasets, CSV IO and IID equal-shard
//! partitioning.
//!
//! IID partitioning is a plain shuffle: per-class proportions inside a shard
//! are not balanced.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, Stream};

/// Labelled samples: `features` is `n x d`, one label in `[0, num_classes)`
/// per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument(
                "num_classes must be positive".into(),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows in the order given by `idx`.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(Matrix::new(idx.len(), d, data)?, labels, self.num_classes)
    }

    /// First `n` rows and the remainder.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n} must lie strictly inside 0..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }
}

/// `classes` Gaussian blobs in `dim` dimensions with unit within-class
/// variance, `n_per_class` samples each.
///
/// When `dim >= classes` the class means are scaled corners of a simplex
/// (distinct, seeded-chosen basis axes) with every pair exactly `separation`
/// apart. Otherwise means are drawn on the unit sphere and rescaled so the
/// closest pair sits `separation` apart. Rows are shuffled, then every
/// feature column is standardized to zero mean and unit variance.
pub fn synth_gaussian_mixture(
    seed: u64,
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
) -> Result<Dataset> {
    if classes < 2 || dim == 0 || n_per_class == 0 || !(separation > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need classes >= 2, dim >= 1, n >= 1, separation > 0; got {classes}, {dim}, {n_per_class}, {separation}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Data, &[]);
    let means = class_means(&mut rng, classes, dim, separation);

    let n = classes * n_per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut data = vec![0.0; n * dim];
    let mut labels = vec![0; n];
    // Sample `k` of the unshuffled sequence lands in row `order[k]`.
    for (k, &row) in order.iter().enumerate() {
        let c = k / n_per_class;
        labels[row] = c;
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            data[row * dim + j] = means[c][j] + z;
        }
    }
    standardize(&mut data, n, dim);
    Dataset::new(Matrix::new(n, dim, data)?, labels, classes)
}

fn class_means<R: Rng>(rng: &mut R, classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if dim >= classes {
        // Scaled simplex corners: pairwise distance is exactly `separation`.
        let scale = separation / std::f64::consts::SQRT_2;
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        return (0..classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[perm[c]] = scale;
                m
            })
            .collect();
    }
    // Too few dimensions for a simplex: random sphere points rescaled so the
    // closest pair is `separation` apart.
    let mut means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let d: f64 = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let scale = if min_dist > 0.0 {
        separation / min_dist
    } else {
        separation
    };
    for m in &mut means {
        m.iter_mut().for_each(|x| *x *= scale);
    }
    means
}

fn standardize(data: &mut [f64], n: usize, dim: usize) {
    for j in 0..dim {
        let mean = (0..n).map(|i| data[i * dim + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (data[i * dim + j] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            data[i * dim + j] = (data[i * dim + j] - mean) / sd;
        }
    }
}

/// Seeded shuffle, then `k` contiguous shards of `n / k` rows each.
pub fn partition_iid(data: &Dataset, k: usize, seed: u64) -> Result<Vec<Dataset>> {
    if k == 0 || !data.len().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot be split into {k} equal shards",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Partition, &[k as u64]));
    order
        .chunks(data.len() / k)
        .map(|idx| data.select(idx))
        .collect()
}

/// Comma-separated rows: feature columns, then an integer label. No header.
pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, num_classes)
}

pub fn parse_csv(text: &str, num_classes: usize) -> Result<Dataset> {
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                reason: "need at least one feature and a label".into(),
            });
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("expected {w} columns, found {}", fields.len()),
                })
            }
            Some(_) => {}
        }
        let (label_field, feats) = fields.split_last().expect("len >= 2");
        for f in feats {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("bad number {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("non-finite feature {f:?}"),
                });
            }
            data.push(v);
        }
        let label: usize = label_field.parse().map_err(|_| Error::Parse {
            line: line_no,
            reason: format!("bad label {label_field:?}"),
        })?;
        if label >= num_classes {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        labels.push(label);
    }
    let Some(w) = width else {
        return Err(Error::Parse {
            line: 0,
            reason: "no data rows".into(),
        });
    };
    let n = labels.len();
    Dataset::new(Matrix::new(n, w - 1, data)?, labels, num_classes)
}

/// Inverse of [`parse_csv`]; floats use the shortest round-trip form.
pub fn to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    for (i, &label) in data.labels.iter().enumerate() {
        for v in data.features.row(i) {
            write!(out, "{v},").expect("write to string");
        }
        writeln!(out, "{label}").expect("write to string");
    }
    out
}

pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_csv(data))?;
    Ok(())
}
