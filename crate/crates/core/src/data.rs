//! Datasets: IDX and CSV loaders, synthetic generators with known optima, uniform
//! mini-batch sampling with replacement, and the stride-two meta subset.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Batch, Targets};
use crate::numerics::{seeded_rng, Matrix, Rng};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

/// Per-feature shift and scale applied by standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Samples stored one per column, with class or real-valued targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    targets: Targets,
    kind: TaskKind,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Targets) -> Result<Self> {
        if features.cols() != targets.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} targets",
                features.cols(),
                targets.len()
            )));
        }
        let kind = match &targets {
            Targets::Classes(c) => TaskKind::Classification {
                classes: c.iter().max().map_or(0, |m| m + 1),
            },
            Targets::Values(_) => TaskKind::Regression,
        };
        Ok(Self {
            features,
            targets,
            kind,
            normalization: None,
        })
    }

    /// Declares the class count explicitly, e.g. when a subset misses some labels.
    pub fn with_class_count(mut self, classes: usize) -> Result<Self> {
        match (&mut self.kind, &self.targets) {
            (TaskKind::Classification { classes: c }, Targets::Classes(labels)) => {
                if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                    return Err(Error::Label { label: bad, classes });
                }
                *c = classes;
                Ok(self)
            }
            _ => Err(Error::Argument(
                "class count only applies to classification data".into(),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Width of the target: class count or target rows.
    pub fn target_dim(&self) -> usize {
        match (&self.kind, &self.targets) {
            (TaskKind::Classification { classes }, _) => *classes,
            (_, Targets::Values(m)) => m.rows(),
            _ => 0,
        }
    }

    /// Batch made of the given sample indices, in order.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let x = self.features.select_columns(indices);
        let y = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values(m) => Targets::Values(m.select_columns(indices)),
        };
        Batch { x, y }
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        self.slice(0, n)
    }

    /// Samples `start..end`, clipped to the dataset size.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let idx: Vec<usize> = (start.min(end)..end).collect();
        let Batch { x, y } = self.gather(&idx);
        Dataset {
            features: x,
            targets: y,
            kind: self.kind,
            normalization: self.normalization.clone(),
        }
    }

    /// Contiguous evaluation batches of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            self.gather(&idx)
        })
    }

    /// Standardizes features with this dataset's own statistics and records them.
    pub fn standardize(&mut self) -> Normalization {
        let (d, n) = self.features.shape();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for r in 0..d {
            let row = self.features.row(r);
            let m = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean[r] = m;
            std[r] = var.max(VARIANCE_FLOOR).sqrt();
        }
        let norm = Normalization { mean, std };
        self.apply_normalization(&norm);
        norm
    }

    /// Applies statistics computed elsewhere, typically on the training split.
    pub fn apply_normalization(&mut self, norm: &Normalization) {
        let cols = self.features.cols();
        let data = self.features.data_mut();
        for (r, (m, s)) in norm.mean.iter().zip(&norm.std).enumerate() {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v = (*v - m) / s;
            }
        }
        self.normalization = Some(norm.clone());
    }
}

/// Every second sample of a dataset, reserved for meta-loss batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaSubset {
    indices: Vec<usize>,
}

impl MetaSubset {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Indices `0, 2, 4, …` of `dataset`.
pub fn meta_subset(dataset: &Dataset) -> MetaSubset {
    MetaSubset {
        indices: (0..dataset.len()).step_by(2).collect(),
    }
}

/// `b` indices drawn uniformly with replacement from `0..n`.
pub fn sample_indices(n: usize, b: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Argument("cannot sample from an empty source".into()));
    }
    if b == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    Ok((0..b).map(|_| rng.random_range(0..n)).collect())
}

/// Uniform mini-batch with replacement from the whole dataset.
pub fn sample_minibatch(dataset: &Dataset, b: usize, rng: &mut Rng) -> Result<Batch> {
    let idx = sample_indices(dataset.len(), b, rng)?;
    Ok(dataset.gather(&idx))
}

/// Uniform mini-batch with replacement from the meta subset.
pub fn sample_meta_minibatch(
    dataset: &Dataset,
    subset: &MetaSubset,
    b: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let picks = sample_indices(subset.len(), b, rng)?;
    let idx: Vec<usize> = picks.into_iter().map(|i| subset.indices[i]).collect();
    Ok(dataset.gather(&idx))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| format_error(path, format!("file ends inside the header at byte {at}")))
}

fn payload<'a>(bytes: &'a [u8], header: usize, expected: usize, path: &Path) -> Result<&'a [u8]> {
    let body = &bytes[header.min(bytes.len())..];
    if body.len() != expected {
        return Err(format_error(
            path,
            format!("expected {expected} data bytes, found {}", body.len()),
        ));
    }
    Ok(body)
}

/// Decodes an IDX image file into `(rows·cols) × n` pixels scaled to `[0,1]`.
pub fn read_idx_images(path: &Path, limit: Option<usize>) -> Result<Matrix> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(format_error(
            path,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = rows * cols;
    if n == 0 || pixels == 0 {
        return Err(format_error(path, "image file declares an empty dimension"));
    }
    let body = payload(&bytes, 16, n * pixels, path)?;
    let keep = limit.map_or(n, |l| l.min(n));
    let mut data = vec![0.0; pixels * keep];
    for s in 0..keep {
        for p in 0..pixels {
            data[p * keep + s] = f64::from(body[s * pixels + p]) / 255.0;
        }
    }
    Ok(Matrix::from_raw(pixels, keep, data))
}

/// Decodes an IDX label file.
pub fn read_idx_labels(path: &Path, limit: Option<usize>) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(format_error(
            path,
            format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = payload(&bytes, 8, n, path)?;
    let keep = limit.map_or(n, |l| l.min(n));
    Ok(body[..keep].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair as a classification dataset.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    load_idx_limited(images, labels, None)
}

/// Like [`load_idx`], keeping only the first `limit` samples.
pub fn load_idx_limited(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let full_images = count_idx_items(images)?;
    let full_labels = count_idx_items(labels)?;
    if full_images != full_labels {
        return Err(Error::Consistency(format!(
            "{} holds {full_images} images but {} holds {full_labels} labels",
            images.display(),
            labels.display()
        )));
    }
    let x = read_idx_images(images, limit)?;
    let mut y = read_idx_labels(labels, None)?;
    let classes = y.iter().max().map_or(0, |m| m + 1);
    y.truncate(x.cols());
    Dataset::new(x, Targets::Classes(y))?.with_class_count(classes)
}

fn count_idx_items(path: &Path) -> Result<usize> {
    let mut head = [0u8; 8];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::Read::read_exact(&mut f, &mut head)
        .map_err(|_| format_error(path, "file shorter than an IDX header"))?;
    Ok(be_u32(&head, 4, path)? as usize)
}

/// Writes `n` images of `rows × cols` bytes in IDX format.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || pixels.len() % per != 0 {
        return Err(Error::Argument(format!(
            "{} pixel bytes do not divide into {rows}x{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes labels in IDX format.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a numeric CSV with a header row as a regression dataset.
///
/// Every column except `target_column` becomes a feature. The target stays in raw units.
pub fn load_csv(path: &Path, target_column: &str, standardize: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let target_idx = headers
        .iter()
        .position(|h| h.trim() == target_column)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: target_column.to_string(),
            message: format!("no column named '{target_column}' in the header"),
        })?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(format_error(path, "CSV needs at least one feature column"));
    }
    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: line,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    column: headers[j].to_string(),
                    message: format!("'{cell}' is not a finite number"),
                }
            })?;
            if j == target_idx {
                ys.push(v);
            } else {
                row.push(v);
            }
        }
        feats.push(row);
    }
    let n = ys.len();
    if n == 0 {
        return Err(format_error(path, "CSV has a header but no data rows"));
    }
    let mut data = vec![0.0; d * n];
    for (s, row) in feats.iter().enumerate() {
        for (f, &v) in row.iter().enumerate() {
            data[f * n + s] = v;
        }
    }
    let mut ds = Dataset::new(
        Matrix::from_raw(d, n, data),
        Targets::Values(Matrix::from_raw(1, n, ys)),
    )?;
    if standardize {
        ds.standardize();
    }
    Ok(ds)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => format_error(path, format!("{other:?}")),
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_raw(rows, cols, data)
}

/// `x ~ N(0, I_d)`, `y = W* x + ε` with `W* ~ N(0, I/d)` and `ε ~ N(0, noise_sd²)`; returns the
/// data and `W*` (`1 × d`).
pub fn synth_regression(seed: u64, n: usize, d: usize, noise_sd: f64) -> Result<(Dataset, Matrix)> {
    if n == 0 || d == 0 {
        return Err(Error::Argument("synthetic regression needs n, d >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let w = normal_matrix(1, d, &mut rng).scale(1.0 / (d as f64).sqrt());
    let x = normal_matrix(d, n, &mut rng);
    let mut y = crate::numerics::matmul(&w, &x)?;
    for v in y.data_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += noise_sd * e;
    }
    Ok((Dataset::new(x, Targets::Values(y))?, w))
}

/// Gaussian blobs: class means `~ N(0, spread²·I)`, samples `mean_y + N(0, I)`.
pub fn synth_classification(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
    spread: f64,
) -> Result<Dataset> {
    if n == 0 || d == 0 || classes < 2 {
        return Err(Error::Argument(
            "synthetic classification needs n, d >= 1 and at least 2 classes".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let means = normal_matrix(d, classes, &mut rng).scale(spread);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x = normal_matrix(d, n, &mut rng);
    for (s, &c) in labels.iter().enumerate() {
        for r in 0..d {
            x.set(r, s, x.get(r, s) + means.get(r, c));
        }
    }
    Dataset::new(x, Targets::Classes(labels))
}
