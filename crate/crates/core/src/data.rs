//! Datasets: synthetic Gaussian blobs, IDX (MNIST-style) files and numeric
//! CSV.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Features (N × d) with integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(invalid(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: num_classes,
            });
        }
        if !features.all_finite() {
            return Err(invalid("features contain non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of samples whose label is in `classes`.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

/// Parameters of [`gaussian_blobs`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Isotropic std of each blob.
    pub spread: f64,
    /// Radius of the sphere the class means are drawn on.
    pub margin: f64,
}

/// Class means uniform on the radius-`margin` sphere, samples
/// `N(mean, spread² I)`. Per class, the first 80% of samples go to the
/// train split and the rest to test. Returns `(train, test, means)`.
pub fn gaussian_blobs(spec: &BlobSpec, seed: u64) -> Result<(Dataset, Dataset, Tensor)> {
    let BlobSpec {
        num_classes,
        dim,
        n_per_class,
        spread,
        margin,
    } = *spec;
    if num_classes < 2 || dim < 2 {
        return Err(invalid("gaussian_blobs needs K >= 2 and d >= 2"));
    }
    if n_per_class < 2 {
        return Err(invalid("gaussian_blobs needs at least 2 samples per class"));
    }
    if !(spread >= 0.0) || !(margin > 0.0) || !spread.is_finite() || !margin.is_finite() {
        return Err(invalid(format!("invalid spread {spread} / margin {margin}")));
    }
    let mut rng = stream(seed, Stream::Data);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut means = Vec::with_capacity(num_classes * dim);
    for _ in 0..num_classes {
        let v: Vec<f64> = (0..dim).map(|_| std_normal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        means.extend(v.iter().map(|x| margin * x / norm));
    }
    let n_train = (n_per_class * 4).div_ceil(5).min(n_per_class - 1);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        let mean = &means[c * dim..(c + 1) * dim];
        for s in 0..n_per_class {
            let dest = if s < n_train { &mut train } else { &mut test };
            dest.0.extend(mean.iter().map(|&m| m + spread * std_normal.sample(&mut rng)));
            dest.1.push(c);
        }
    }
    let build = |(x, y): (Vec<f64>, Vec<usize>), split| -> Result<Dataset> {
        let n = y.len();
        Dataset::new(Tensor::matrix(n, dim, x)?, y, num_classes, split)
    };
    Ok((
        build(train, Split::Train)?,
        build(test, Split::Test)?,
        Tensor::matrix(num_classes, dim, means)?,
    ))
}

/// Writes an IDX image file (`u8` pixels, rank-3) and label file.
pub fn write_idx(images: &Path, labels: &Path, pixels: &[u8], rows: usize, cols: usize, ys: &[u8]) -> Result<()> {
    let n = ys.len();
    if pixels.len() != n * rows * cols {
        return Err(invalid("pixel buffer does not match n × rows × cols"));
    }
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend_from_slice(pixels);
    std::fs::write(images, buf)?;
    let mut buf = Vec::with_capacity(8 + n);
    buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(n as u32).to_be_bytes());
    buf.extend_from_slice(ys);
    std::fs::write(labels, buf)?;
    Ok(())
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let chunk = bytes.get(at..at + 4).ok_or(Error::IdxTruncated {
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

/// Raw pixel bytes and per-image size of an IDX image file.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4)? as usize;
    let rows = be_u32(&bytes, 8)? as usize;
    let cols = be_u32(&bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok((bytes[16..expected].to_vec(), n, rows * cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an IDX image/label pair with pixels scaled to `[0, 1]`. The class
/// count is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (pixels, n, per_image) = read_idx_images(images)?;
    let ys = read_idx_labels(labels)?;
    if ys.len() != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: ys.len(),
        });
    }
    let features = Tensor::matrix(n, per_image, pixels.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels: Vec<usize> = ys.iter().map(|&y| y as usize).collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, k, split)
}

/// Loads a numeric CSV and standardizes its features. With `fitted = None`
/// the file is the train split and its own statistics are fitted; otherwise
/// it is a test split scaled with the given train statistics.
pub fn load_csv(path: &Path, label_column: usize, fitted: Option<&Standardizer>) -> Result<(Dataset, Standardizer)> {
    match fitted {
        None => {
            let raw = read_csv(path, label_column, Split::Train)?;
            let s = Standardizer::fit(&raw);
            Ok((s.apply(&raw)?, s))
        }
        Some(s) => Ok((s.apply(&read_csv(path, label_column, Split::Test)?)?, s.clone())),
    }
}

/// Reads a numeric CSV without scaling. The first row is treated as a header
/// when any of its cells fails to parse as a number. `label_column` indexes
/// the raw columns.
pub fn read_csv(path: &Path, label_column: usize, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let cells: Vec<&str> = record.iter().map(str::trim).collect();
        if r == 0 && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if label_column >= cells.len() {
            return Err(invalid(format!("label column {label_column} missing on row {r}")));
        }
        if *width.get_or_insert(cells.len()) != cells.len() {
            return Err(invalid(format!("row {r} has {} cells, expected {}", cells.len(), width.unwrap())));
        }
        let mut feats = Vec::with_capacity(cells.len() - 1);
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::CsvCell {
                row: r,
                col: c,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvCell {
                    row: r,
                    col: c,
                    value: cell.to_string(),
                });
            }
            if c == label_column {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::CsvCell {
                        row: r,
                        col: c,
                        value: cell.to_string(),
                    });
                }
                labels.push(v as usize);
            } else {
                feats.push(v);
            }
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(invalid(format!("{} has no data rows", path.display())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::from_rows(&rows)?, labels, k, split)
}

/// Per-column mean and std from a train split, applied to any split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant columns get std 1 so they map to zero instead of NaN.
    pub fn fit(train: &Dataset) -> Self {
        let (n, d) = (train.len(), train.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(train.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(train.features.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.mean.len() {
            return Err(invalid("standardizer dimension mismatch"));
        }
        let mut f = data.features.clone();
        for i in 0..f.rows() {
            for ((v, m), s) in f.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Dataset::new(f, data.labels.clone(), data.num_classes, data.split)
    }
}

/// Shuffled copy of `0..n`.
pub fn shuffled_indices<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
