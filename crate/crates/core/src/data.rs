//! Datasets: the two-Gaussian collapse toy, MNIST-family IDX ingestion,
//! and the shift transforms (CMNIST, OODom, label noise) plus seeded splits.
//!
//! Every generator is a pure function of its arguments and seed; none of
//! them mutates its input.

use std::fs;
use std::path::Path;

use numcore::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    /// `N x D` inputs.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        role: Role,
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if n != labels.len() {
            return Err(Error::Shape(format!("{n} inputs but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { name: name.into(), role, inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            role: self.role,
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Layout of the two-Gaussian toy and its probe grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub centers: Vec<[f64; 2]>,
    pub per_class: usize,
    pub std: f64,
    pub grid_extent: [f64; 2],
    pub grid_resolution: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        // Both centers share y = 0, so only x is discriminative.
        Self {
            centers: vec![[-2.0, 0.0], [2.0, 0.0]],
            per_class: 500,
            std: 0.5,
            grid_extent: [-6.0, 6.0],
            grid_resolution: 50,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.centers.len() < 2 {
            return Err(Error::Config("toy needs at least two centers".into()));
        }
        if !(self.std > 0.0) {
            return Err(Error::Config("toy std must be positive".into()));
        }
        if self.grid_resolution < 2 || !(self.grid_extent[1] > self.grid_extent[0]) {
            return Err(Error::Config("toy grid needs resolution >= 2 and a non-empty extent".into()));
        }
        Ok(())
    }
}

/// Regular `resolution²` lattice over `[lo, hi]²`, row-major with x fastest.
pub fn lattice(extent: [f64; 2], resolution: usize) -> Tensor {
    let [lo, hi] = extent;
    let step = (hi - lo) / (resolution - 1) as f64;
    let mut data = Vec::with_capacity(2 * resolution * resolution);
    for iy in 0..resolution {
        for ix in 0..resolution {
            data.push(lo + step * ix as f64);
            data.push(lo + step * iy as f64);
        }
    }
    Tensor::new(vec![resolution * resolution, 2], data).expect("lattice shape")
}

/// Indices of lattice points farther than `radius` from every center.
pub fn far_probes(grid: &Tensor, centers: &[[f64; 2]], radius: f64) -> Vec<usize> {
    (0..grid.shape()[0])
        .filter(|&i| {
            let p = grid.row(i);
            centers.iter().all(|c| (p[0] - c[0]).hypot(p[1] - c[1]) > radius)
        })
        .collect()
}

/// Gaussian blobs, one class per center, plus the unlabeled probe grid.
pub fn make_collapse_toy(spec: &ToySpec, seed: u64) -> Result<(Dataset, Tensor)> {
    spec.validate()?;
    let mut r = rng::stream(seed, "toy");
    let noise = Normal::new(0.0, spec.std).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.centers.len() * spec.per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (class, c) in spec.centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.push(c[0] + noise.sample(&mut r));
            data.push(c[1] + noise.sample(&mut r));
            labels.push(class);
        }
    }
    let ds = Dataset::new("toy_collapse", Role::Train, Tensor::new(vec![n, 2], data)?, labels, spec.centers.len())?;
    Ok((ds, lattice(spec.grid_extent, spec.grid_resolution)))
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses IDX image bytes into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format(format!("images: expected {need} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!("labels: expected {n} bytes, found {}", body.len())));
    }
    Ok(&body[..n])
}

/// Reads an IDX image/label pair; pixels are scaled to `[0, 1]`.
///
/// Standardization is a separate step ([`Standardizer`]) because its
/// statistics must come from the in-distribution training split.
pub fn read_idx(images_path: &Path, labels_path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    let labels: Vec<usize> = labels.iter().map(|&b| usize::from(b)).collect();
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let inputs = Tensor::new(vec![n, rows * cols], pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let name = images_path.file_name().map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Role::Train, inputs, labels, c)
}

/// Serializes images (`N x rows·cols`, values in `[0, 255]`) and labels in
/// IDX format.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::Shape(format!("{} pixels for {n} images of {rows}x{cols}", pixels.len())));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(labels);
    fs::write(images_path, img)?;
    fs::write(labels_path, lbl)?;
    Ok(())
}

/// Scalar zero-mean / unit-variance normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Fits on the in-distribution training inputs only.
    pub fn fit(train: &Dataset) -> Self {
        let d = train.inputs.data();
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn apply(&self, d: &Dataset) -> Dataset {
        let mut out = d.clone();
        out.inputs = d.inputs.map(|x| (x - self.mean) / self.std);
        out
    }
}

/// Replicates a 1-channel 28x28 image into 3 channels (channel-major).
pub fn replicate_channels(d: &Dataset) -> Result<Dataset> {
    if d.dim() != MNIST_PIXELS {
        return Err(Error::Shape(format!("expected {MNIST_PIXELS} inputs per sample, got {}", d.dim())));
    }
    let n = d.len();
    let mut data = Vec::with_capacity(3 * n * MNIST_PIXELS);
    for i in 0..n {
        let row = d.inputs.row(i);
        for _ in 0..3 {
            data.extend_from_slice(row);
        }
    }
    let mut out = d.clone();
    out.inputs = Tensor::new(vec![n, 3 * MNIST_PIXELS], data)?;
    Ok(out)
}

/// CMNIST: replicate to 3x28x28 and zero one uniformly chosen channel per
/// sample. The channel choice is independent of the label.
pub fn make_cmnist(d: &Dataset, seed: u64) -> Result<Dataset> {
    let (out, _) = make_cmnist_with_channels(d, seed)?;
    Ok(out)
}

/// As [`make_cmnist`], also returning the zeroed channel of every sample.
pub fn make_cmnist_with_channels(d: &Dataset, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let mut out = replicate_channels(d)?;
    let mut r = rng::stream(seed, "cmnist");
    let mut channels = Vec::with_capacity(d.len());
    let stride = 3 * MNIST_PIXELS;
    let data = out.inputs.data_mut();
    for i in 0..d.len() {
        let c = r.random_range(0..3);
        channels.push(c);
        let start = i * stride + c * MNIST_PIXELS;
        data[start..start + MNIST_PIXELS].iter_mut().for_each(|x| *x = 0.0);
    }
    out.name = format!("{}_cmnist", d.name);
    Ok((out, channels))
}

/// OODom: multiplies (already standardized) inputs by 255.
pub fn make_oodom(d: &Dataset) -> Dataset {
    let mut out = d.clone();
    out.inputs = d.inputs.scale(255.0);
    out.role = Role::Ood;
    out.name = format!("{}_oodom", d.name);
    out
}

/// Reassigns `ceil(rho·N)` uniformly chosen training labels to a class
/// drawn uniformly from all `C` classes (the original may be redrawn).
pub fn inject_label_noise(d: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    let (out, _) = inject_label_noise_with_indices(d, rho, seed)?;
    Ok(out)
}

/// As [`inject_label_noise`], also returning the touched indices.
pub fn inject_label_noise_with_indices(d: &Dataset, rho: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("label noise fraction {rho} outside [0, 1]")));
    }
    if d.role != Role::Train {
        return Err(Error::Config(format!("label noise applies to training data, got role {:?}", d.role)));
    }
    let n = d.len();
    let k = ((rho * n as f64).ceil() as usize).min(n);
    let mut r = rng::stream(seed, "label_noise");
    let mut idx = sample(&mut r, n, k).into_vec();
    idx.sort_unstable();
    let mut out = d.clone();
    for &i in &idx {
        out.labels[i] = r.random_range(0..d.num_classes);
    }
    Ok((out, idx))
}

/// 80/20 train/validation split under a seeded permutation (validation size
/// is `floor(N/5)`).
pub fn split(d: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = d.len();
    if n < 5 {
        return Err(Error::Config(format!("cannot split {n} samples 80/20; need at least 5")));
    }
    let mut r = rng::stream(seed, "split");
    let perm = sample(&mut r, n, n).into_vec();
    let n_val = n / 5;
    let (val_idx, train_idx) = perm.split_at(n_val);
    Ok((d.subset(train_idx).with_role(Role::Train), d.subset(val_idx).with_role(Role::Val)))
}
