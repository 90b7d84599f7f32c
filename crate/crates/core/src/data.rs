//! Image datasets: IDX ingestion, synthetic outlier generators and the
//! brightness perturbation.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::hash::digest64;
use crate::tensor::{Rng, Tensor};

/// Magic number of an unsigned-byte, rank-3 IDX file.
pub const IDX_MAGIC_U8_3D: u32 = 0x0000_0803;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic 0x{found:08x} (expected 0x{IDX_MAGIC_U8_3D:08x})")]
    BadMagic { found: u32 },
    #[error("truncated IDX file: {missing} more bytes expected")]
    Truncated { missing: usize },
    #[error("IDX dimensions {dims:?} do not match payload: {reason}")]
    DimMismatch { dims: Vec<u32>, reason: String },
    #[error("invalid manifest line {line}: {text:?}")]
    Manifest { line: usize, text: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Images `[N, C, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Tensor<f32>,
    pub label: String,
    pub source_hash: u64,
}

impl ImageDataset {
    /// Wraps `[N, C, H, W]` images; values are clamped into `[0, 1]`.
    pub fn new(images: Tensor<f32>, label: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] == 0 {
            return Err(DataError::Invalid(format!(
                "dataset needs shape [N>=1, C, H, W], got {:?}",
                images.shape()
            )));
        }
        let images = images
            .map("clamp", |v| v.clamp(0.0, 1.0))
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        let source_hash = digest64(bytemuck_f32(images.data()).as_slice());
        Ok(Self { images, label: label.into(), source_hash })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Batch tensor `[len(indices), C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, data).expect("dataset values are finite")
    }

    /// New dataset made of the given rows, keeping the label.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(DataError::Invalid(format!("index {bad} out of range for {} samples", self.len())));
        }
        Self::new(self.batch(indices), self.label.clone())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(DataError::Invalid(format!(
                "requested {n} samples but {} has only {}",
                self.label,
                self.len()
            )));
        }
        self.select(&(0..n).collect::<Vec<_>>())
    }
}

fn bytemuck_f32(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Parses an unsigned-byte rank-3 IDX payload (pixels scaled by 1/255).
pub fn parse_idx(bytes: &[u8], label: impl Into<String>) -> Result<ImageDataset> {
    if bytes.len() < 16 {
        return Err(DataError::Truncated { missing: 16 - bytes.len() });
    }
    let mut cur = Cursor::new(bytes);
    let magic = cur.read_u32::<BigEndian>().unwrap();
    if magic != IDX_MAGIC_U8_3D {
        return Err(DataError::BadMagic { found: magic });
    }
    let dims: Vec<u32> = (0..3).map(|_| cur.read_u32::<BigEndian>().unwrap()).collect();
    let count = dims.iter().map(|&d| d as usize).product::<usize>();
    if dims[0] == 0 || count == 0 {
        return Err(DataError::DimMismatch { dims, reason: "zero-sized dimension".into() });
    }
    let payload = &bytes[16..];
    if payload.len() < count {
        return Err(DataError::Truncated { missing: count - payload.len() });
    }
    if payload.len() > count {
        return Err(DataError::DimMismatch {
            dims,
            reason: format!("{} trailing bytes", payload.len() - count),
        });
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    let shape = vec![dims[0] as usize, 1, dims[1] as usize, dims[2] as usize];
    let mut ds = ImageDataset::new(Tensor::new(shape, data).expect("bytes are finite"), label)?;
    ds.source_hash = digest64(bytes);
    Ok(ds)
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    let label = path.file_stem().map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    parse_idx(&bytes, label)
}

/// Encodes single-channel images as IDX, quantising `round(255·v)`.
pub fn encode_idx(ds: &ImageDataset) -> Result<Vec<u8>> {
    let shape = ds.images.shape();
    if shape[1] != 1 {
        return Err(DataError::Invalid(format!("IDX output needs one channel, got {}", shape[1])));
    }
    let mut out = Vec::with_capacity(16 + ds.images.len());
    out.write_u32::<BigEndian>(IDX_MAGIC_U8_3D).unwrap();
    for &d in &[shape[0], shape[2], shape[3]] {
        out.write_u32::<BigEndian>(d as u32).unwrap();
    }
    out.extend(ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn write_idx(ds: &ImageDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_idx(ds)?).map_err(|source| DataError::Io { path: path.to_owned(), source })
}

fn check_gen(n: usize, shape: (usize, usize)) -> Result<()> {
    if n == 0 || shape.0 == 0 || shape.1 == 0 {
        return Err(DataError::Invalid(format!("need n >= 1 and a non-empty shape, got n={n}, {shape:?}")));
    }
    Ok(())
}

/// Every pixel drawn uniformly from `{0, …, 255} / 255`.
pub fn gen_noise(n: usize, shape: (usize, usize), seed: u64) -> Result<ImageDataset> {
    check_gen(n, shape)?;
    let mut rng = Rng::new(seed);
    let data = (0..n * shape.0 * shape.1).map(|_| rng.below(256) as f32 / 255.0).collect();
    let t = Tensor::new(vec![n, 1, shape.0, shape.1], data).expect("finite");
    ImageDataset::new(t, "noise")
}

/// One uniformly drawn level from `{0, …, 255} / 255` per image.
pub fn gen_constant(n: usize, shape: (usize, usize), seed: u64) -> Result<ImageDataset> {
    check_gen(n, shape)?;
    let mut rng = Rng::new(seed);
    let per = shape.0 * shape.1;
    let mut data = Vec::with_capacity(n * per);
    for _ in 0..n {
        let level = rng.below(256) as f32 / 255.0;
        data.extend(std::iter::repeat_n(level, per));
    }
    let t = Tensor::new(vec![n, 1, shape.0, shape.1], data).expect("finite");
    ImageDataset::new(t, "constant")
}

/// `pixel <- clamp(pixel · factor, 0, 1)`.
pub fn brightness(ds: &ImageDataset, factor: f64) -> Result<ImageDataset> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(DataError::Invalid(format!("brightness factor must be positive, got {factor}")));
    }
    let f = factor as f32;
    let images = ds
        .images
        .map("brightness", |v| (v * f).clamp(0.0, 1.0))
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    ImageDataset::new(images, format!("{}@{factor}x", ds.label))
}

/// One `label=path` entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub label: String,
    pub path: PathBuf,
}

/// Parses `label=path` lines; blank lines and `#` comments are skipped and
/// relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((label, path)) = line.split_once('=') else {
            return Err(DataError::Manifest { line: i + 1, text: raw.to_string() });
        };
        let (label, path) = (label.trim(), path.trim());
        if label.is_empty() || path.is_empty() {
            return Err(DataError::Manifest { line: i + 1, text: raw.to_string() });
        }
        let path = PathBuf::from(path);
        let path = if path.is_relative() { base.join(path) } else { path };
        out.push(ManifestEntry { label: label.to_string(), path });
    }
    Ok(out)
}

/// Loads every dataset named in a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageDataset>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)?
        .into_iter()
        .map(|e| {
            let mut ds = load_idx(&e.path)?;
            ds.label = e.label;
            Ok(ds)
        })
        .collect()
}

/// Concatenates datasets with identical sample shapes.
pub fn concat(parts: &[ImageDataset], label: impl Into<String>) -> Result<ImageDataset> {
    let first = parts.first().ok_or_else(|| DataError::Invalid("nothing to concatenate".into()))?;
    let mut data = Vec::new();
    let mut n = 0;
    for p in parts {
        if p.sample_shape() != first.sample_shape() {
            return Err(DataError::Invalid(format!(
                "sample shape {:?} differs from {:?}",
                p.sample_shape(),
                first.sample_shape()
            )));
        }
        data.extend_from_slice(p.images.data());
        n += p.len();
    }
    let mut shape = vec![n];
    shape.extend_from_slice(first.sample_shape());
    ImageDataset::new(Tensor::new(shape, data).expect("finite"), label)
}
