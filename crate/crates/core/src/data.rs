//! Datasets: synthetic blobs, CSV and IDX ingestion, stratified splitting and
//! inverse-frequency class weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Feature matrix (row-major, `len() x dim`) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub id: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
        id: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "feature dimension must be positive".into(),
            ));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::LengthMismatch(format!(
                "{} feature values for {} labels of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
            id: id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], id: impl Into<String>) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            id: id.into(),
        }
    }

    /// Concatenates datasets in order. All must share `dim`.
    pub fn concat(parts: &[Dataset], id: impl Into<String>) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyList("no datasets to concatenate".into()))?;
        let mut out = Dataset {
            features: Vec::new(),
            dim: first.dim,
            labels: Vec::new(),
            num_classes: parts.iter().map(|p| p.num_classes).max().unwrap_or(0),
            id: id.into(),
        };
        for p in parts {
            if p.dim != out.dim {
                return Err(Error::ShapeMismatch(format!(
                    "dataset `{}` has dimension {}, expected {}",
                    p.id, p.dim, out.dim
                )));
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// Gaussian-blob generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Class means are `mean_scale * N(0, I)`.
    pub mean_scale: f64,
    /// Per-sample isotropic noise.
    pub sigma: f64,
    /// When nonzero, each class mean is moved by `domain_shift * N(0, I)`
    /// drawn from an independent stream of the same seed.
    pub domain_shift: f64,
    /// Seed for class means and, via `sample_stream`, samples.
    pub seed: u64,
    /// Selects an independent sample stream; two specs that differ only here
    /// share class means but not samples.
    pub sample_stream: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 16,
            samples_per_class: 250,
            mean_scale: 1.0,
            sigma: 1.0,
            domain_shift: 0.0,
            seed: 3315,
            sample_stream: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig(
                "num_classes, dim and samples_per_class must be positive".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !self.mean_scale.is_finite() || !self.domain_shift.is_finite() {
            return Err(Error::InvalidConfig(
                "mean_scale and domain_shift must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Class means after the domain shift.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut means_rng = rng::stream(self.seed, rng::MEANS);
        let mut shift_rng = rng::stream(self.seed, rng::SHIFT);
        (0..self.num_classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| {
                        let m: f64 = means_rng.sample(StandardNormal);
                        let s: f64 = shift_rng.sample(StandardNormal);
                        self.mean_scale * m + self.domain_shift * s
                    })
                    .collect()
            })
            .collect()
    }
}

/// Balanced Gaussian blobs, class-major order.
pub fn generate_blobs(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.class_means();
    let mut sample_rng = rng::stream(spec.seed, rng::SAMPLES + spec.sample_stream);
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in mean {
                let z: f64 = sample_rng.sample(StandardNormal);
                features.push((m + spec.sigma * z) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, spec.dim, labels, spec.num_classes, "blobs")
}

/// Splits `data` into `parts` disjoint datasets named `part_0`, `part_1`, ...
///
/// Each class is shuffled with the seeded stream and dealt round-robin; the
/// dealing cursor carries over between classes so part sizes also differ by
/// at most one.
pub fn stratified_split(data: &Dataset, parts: usize, seed: u64) -> Result<Vec<Dataset>> {
    split(data, parts, seed, true)
}

/// As [`stratified_split`]; with `stratified = false` the whole index set is
/// shuffled and dealt without regard to class.
pub fn split(data: &Dataset, parts: usize, seed: u64, stratified: bool) -> Result<Vec<Dataset>> {
    if parts == 0 {
        return Err(Error::InvalidConfig("parts must be at least 1".into()));
    }
    if parts > data.len() {
        return Err(Error::PartsExceedSamples {
            parts,
            samples: data.len(),
        });
    }
    let mut rng = rng::stream(seed, rng::SPLIT);
    let groups = if stratified {
        data.indices_by_class()
    } else {
        vec![(0..data.len()).collect()]
    };
    let mut assigned = vec![Vec::new(); parts];
    let mut cursor = 0;
    for mut group in groups {
        group.shuffle(&mut rng);
        for i in group {
            assigned[cursor].push(i);
            cursor = (cursor + 1) % parts;
        }
    }
    Ok(assigned
        .iter()
        .enumerate()
        .map(|(k, idx)| data.subset(idx, format!("part_{k}")))
        .collect())
}

/// Stratified train/test holdout. Per class, `round(count * test_fraction)`
/// shuffled samples go to the test set. Returns `(train, test)`.
pub fn stratified_holdout(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut rng = rng::stream(seed, rng::HOLDOUT);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in data.indices_by_class() {
        group.shuffle(&mut rng);
        let k = (group.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&group[..k]);
        train.extend_from_slice(&group[k..]);
    }
    Ok((data.subset(&train, "train"), data.subset(&test, "test")))
}

/// `w_c = n / (C * count_c)`, and 0 for classes with no samples.
pub fn class_weights(data: &Dataset) -> Vec<f64> {
    let n = data.len() as f64;
    let c = data.num_classes as f64;
    data.class_counts()
        .into_iter()
        .map(|count| {
            if count == 0 {
                0.0
            } else {
                n / (c * count as f64)
            }
        })
        .collect()
}

/// Writes `f0,...,f{d-1},label` CSV. Floats use shortest round-trip formatting.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let to_io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    let mut header: Vec<String> = (0..data.dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(to_io)?;
    let mut record = Vec::with_capacity(data.dim + 1);
    for i in 0..data.len() {
        record.clear();
        record.extend(data.row(i).iter().map(|v| v.to_string()));
        record.push(data.labels[i].to_string());
        w.write_record(&record).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a CSV written by [`write_csv`]. The class count is inferred as
/// `max(label) + 1` unless given. The dataset id is the file stem.
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&text, num_classes, id)
}

pub fn parse_csv(text: &str, num_classes: Option<usize>, id: impl Into<String>) -> Result<Dataset> {
    let parse_err = |row, column, message: String| Error::ParseError {
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_err(1, 1, "empty file".into())),
        Some(r) => r.map_err(|e| parse_err(1, 1, e.to_string()))?,
    };
    if header.len() < 2 {
        return Err(parse_err(
            1,
            1,
            "expected at least one feature column and a label".into(),
        ));
    }
    let dim = header.len() - 1;
    for (i, name) in header.iter().enumerate() {
        let expected = if i == dim {
            "label".to_string()
        } else {
            format!("f{i}")
        };
        if name.trim() != expected {
            return Err(parse_err(
                1,
                i + 1,
                format!("expected header `{expected}`, found `{name}`"),
            ));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in records.enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| parse_err(row, 1, e.to_string()))?;
        if record.len() != dim + 1 {
            return Err(parse_err(
                row,
                record.len().min(dim + 1),
                format!("expected {} cells, found {}", dim + 1, record.len()),
            ));
        }
        for (col, cell) in record.iter().take(dim).enumerate() {
            let v: f32 = cell
                .trim()
                .parse()
                .ok()
                .filter(|v: &f32| v.is_finite())
                .ok_or_else(|| {
                    parse_err(row, col + 1, format!("`{cell}` is not a finite number"))
                })?;
            features.push(v);
        }
        let cell = &record[dim];
        let label: usize = cell
            .trim()
            .parse()
            .map_err(|_| parse_err(row, dim + 1, format!("`{cell}` is not a class label")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, 1, "no data rows".into()));
    }
    let inferred = labels.iter().max().map_or(0, |m| m + 1);
    let num_classes = num_classes.unwrap_or(inferred);
    Dataset::new(features, dim, labels, num_classes, id)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::LengthMismatch(format!("{what} header is truncated")))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and, for
/// `downscale > 1`, average-pooled over `downscale x downscale` windows
/// (trailing rows/columns that do not fill a window are dropped).
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    downscale: usize,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let id = ip
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_idx(&images, &labels, downscale, id)
}

pub fn parse_idx(
    images: &[u8],
    labels: &[u8],
    downscale: usize,
    id: impl Into<String>,
) -> Result<Dataset> {
    if downscale == 0 {
        return Err(Error::InvalidConfig("downscale must be at least 1".into()));
    }
    let magic = read_be_u32(images, 0, "image")?;
    if magic != IDX_IMAGES {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES,
            found: magic,
        });
    }
    let magic = read_be_u32(labels, 0, "label")?;
    if magic != IDX_LABELS {
        return Err(Error::BadMagic {
            expected: IDX_LABELS,
            found: magic,
        });
    }
    let n = read_be_u32(images, 4, "image")? as usize;
    let rows = read_be_u32(images, 8, "image")? as usize;
    let cols = read_be_u32(images, 12, "image")? as usize;
    let n_labels = read_be_u32(labels, 4, "label")? as usize;
    if n != n_labels {
        return Err(Error::LengthMismatch(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    let pixels = &images[16..];
    let per_image = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::LengthMismatch("image dimensions overflow".into()))?;
    if n.checked_mul(per_image) != Some(pixels.len()) {
        return Err(Error::LengthMismatch(format!(
            "image payload is {} bytes, expected {n} x {rows} x {cols}",
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(Error::LengthMismatch(format!(
            "label payload is {} bytes, expected {n}",
            label_bytes.len()
        )));
    }

    let (out_rows, out_cols) = (rows / downscale, cols / downscale);
    let dim = out_rows * out_cols;
    if dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "downscale {downscale} leaves no pixels of a {rows}x{cols} image"
        )));
    }
    let window = (downscale * downscale) as f32;
    let mut features = Vec::with_capacity(n * dim);
    for img in pixels.chunks_exact(per_image.max(1)).take(n) {
        for r in 0..out_rows {
            for c in 0..out_cols {
                let mut acc = 0u32;
                for dr in 0..downscale {
                    for dc in 0..downscale {
                        acc += u32::from(img[(r * downscale + dr) * cols + c * downscale + dc]);
                    }
                }
                features.push(acc as f32 / (255.0 * window));
            }
        }
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, dim, labels, num_classes, id)
}
