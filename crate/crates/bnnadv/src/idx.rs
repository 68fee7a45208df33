//! IDX, the MNIST container: big-endian magic `[0, 0, type, ndim]`, one
//! big-endian `u32` per dimension, then row-major element data.

use std::fs;
use std::path::{Path, PathBuf};

use bnnadv_core::data::Dataset;
use bnnadv_core::NUM_CLASSES;

use crate::error::{io_err, Error, Result};

/// Element types of the IDX format (the type byte of the magic).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8 = 0x08,
    I8 = 0x09,
    I16 = 0x0B,
    I32 = 0x0C,
    F32 = 0x0D,
    F64 = 0x0E,
}

impl IdxType {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    pub fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// A decoded IDX array. Integer elements are widened to `f64` as stored
/// (no scaling); see [`load_mnist`] for the pixel convention.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub kind: IdxType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Parses IDX bytes. `path` is only used in error messages.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(
            path,
            bytes.len(),
            "file shorter than the 4-byte magic number",
        ));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, 0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let kind = IdxType::from_code(bytes[2])
        .ok_or_else(|| format_err(path, 2, format!("unknown element type 0x{:02x}", bytes[2])))?;
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(format_err(path, 3, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated header, expected {header} bytes"),
        ));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, 4, "dimension product overflows"))?;
    let body = &bytes[header..];
    let expected = count * kind.width();
    if body.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated data, expected {} bytes in total", header + expected),
        ));
    }
    if body.len() > expected {
        return Err(format_err(path, header + expected, "trailing bytes after data"));
    }
    let data = match kind {
        IdxType::U8 => body.iter().map(|&b| b as f64).collect(),
        IdxType::I8 => body.iter().map(|&b| b as i8 as f64).collect(),
        IdxType::I16 => body
            .chunks_exact(2)
            .map(|c| i16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        IdxType::I32 => body
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        IdxType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        IdxType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(IdxArray { kind, dims, data })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_idx(&bytes, path)
}

/// Encodes an array. Values must fit the element type; `U8` values are
/// rounded to the nearest integer.
pub fn encode_idx(kind: IdxType, dims: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 255 {
        return Err(Error::Config(format!(
            "IDX needs 1..=255 dimensions, got {}",
            dims.len()
        )));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Config(format!(
            "dims {dims:?} do not match {} values",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len() * kind.width());
    out.extend_from_slice(&[0, 0, kind as u8, dims.len() as u8]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    for &v in data {
        match kind {
            IdxType::U8 => {
                let r = v.round();
                if !(0.0..=255.0).contains(&r) {
                    return Err(Error::Config(format!("value {v} does not fit an unsigned byte")));
                }
                out.push(r as u8);
            }
            IdxType::I8 => out.push(v.round() as i8 as u8),
            IdxType::I16 => out.extend_from_slice(&(v.round() as i16).to_be_bytes()),
            IdxType::I32 => out.extend_from_slice(&(v.round() as i32).to_be_bytes()),
            IdxType::F32 => out.extend_from_slice(&(v as f32).to_be_bytes()),
            IdxType::F64 => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    Ok(out)
}

pub fn write_idx(path: impl AsRef<Path>, kind: IdxType, dims: &[usize], data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_idx(kind, dims, data)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Image files store bytes `0..=255` (scaled by 1/255 on load) or floating
/// point pixels already in `[0, 1]`.
pub fn images_from_idx(array: &IdxArray, path: &Path) -> Result<(Vec<f64>, usize)> {
    if array.dims.len() < 2 {
        return Err(format_err(
            path,
            3,
            format!("image file needs at least 2 dimensions, got {}", array.dims.len()),
        ));
    }
    let dim = array.dims[1..].iter().product();
    let pixels = match array.kind {
        IdxType::U8 => array.data.iter().map(|&b| b / 255.0).collect(),
        IdxType::F32 | IdxType::F64 => array.data.clone(),
        other => return Err(format_err(path, 2, format!("unsupported pixel type {other:?}"))),
    };
    Ok((pixels, dim))
}

fn labels_from_idx(array: &IdxArray, path: &Path) -> Result<Vec<usize>> {
    if array.kind != IdxType::U8 || array.dims.len() != 1 {
        return Err(format_err(
            path,
            2,
            "label file must be a 1-dimensional unsigned byte array",
        ));
    }
    let header = 8;
    array
        .data
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < NUM_CLASSES {
                Ok(l as usize)
            } else {
                Err(format_err(path, header + i, format!("label {l} out of range")))
            }
        })
        .collect()
}

/// Reads an image file and an optional label file into a [`Dataset`].
pub fn load_images(images_path: impl AsRef<Path>, labels_path: Option<&Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let array = read_idx(images_path)?;
    let (pixels, dim) = images_from_idx(&array, images_path)?;
    let labels = match labels_path {
        Some(p) => {
            let labels = labels_from_idx(&read_idx(p)?, p)?;
            if labels.len() != array.dims[0] {
                return Err(format_err(
                    p,
                    4,
                    format!(
                        "{} labels but {} images in {}",
                        labels.len(),
                        array.dims[0],
                        images_path.display()
                    ),
                ));
            }
            Some(labels)
        }
        None => None,
    };
    if let Some(bad) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
        let offset = 4 + 4 * array.dims.len() + bad * array.kind.width();
        return Err(format_err(
            images_path,
            offset,
            format!("pixel {} outside [0, 1]", pixels[bad]),
        ));
    }
    Ok(Dataset::new(pixels, labels, dim, NUM_CLASSES)?)
}

/// `load_images` with a mandatory label file.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_images(images_path, Some(labels_path.as_ref()))
}

/// Writes a dataset as an image file plus, when labelled, a label file.
/// `U8` quantises pixels to `round(255·x)`; `F64` is lossless.
pub fn save_dataset(set: &Dataset, images_path: &Path, labels_path: Option<&Path>, kind: IdxType) -> Result<()> {
    let dims = image_dims(set);
    let scaled: Vec<f64>;
    let data = if kind == IdxType::U8 {
        scaled = set.images().iter().map(|p| p * 255.0).collect();
        &scaled[..]
    } else {
        set.images()
    };
    write_idx(images_path, kind, &dims, data)?;
    if let (Some(path), Some(labels)) = (labels_path, set.labels()) {
        let l: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        write_idx(path, IdxType::U8, &[labels.len()], &l)?;
    }
    Ok(())
}

fn image_dims(set: &Dataset) -> Vec<usize> {
    if set.dim() == 784 {
        vec![set.len(), 28, 28]
    } else {
        vec![set.len(), set.dim()]
    }
}

/// File names of the four official MNIST files inside `dir`.
#[derive(Debug, Clone)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            train_images: d.join("train-images-idx3-ubyte"),
            train_labels: d.join("train-labels-idx1-ubyte"),
            test_images: d.join("t10k-images-idx3-ubyte"),
            test_labels: d.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn train(&self) -> Result<Dataset> {
        load_mnist(&self.train_images, &self.train_labels)
    }

    pub fn test(&self) -> Result<Dataset> {
        load_mnist(&self.test_images, &self.test_labels)
    }
}
