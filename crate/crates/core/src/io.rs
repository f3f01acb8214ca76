//! File interchange: npy arrays, 8-bit greyscale PNG masks, and the dataset
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::npy::{self, Dtype, NpyArray, NpyError};
use crate::tensor::{BinaryMask, Heatmap, ImageTensor, TensorError};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("npy: {0}")]
    Npy(#[from] NpyError),
    #[error("png: {0}")]
    Png(String),
    #[error("rank mismatch: expected {expected}, found {found} (shape {shape:?})")]
    RankMismatch { expected: &'static str, found: usize, shape: Vec<usize> },
    #[error("invalid array contents: {0}")]
    Tensor(#[from] TensorError),
    #[error("manifest: {0}")]
    Manifest(String),
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, LoadError> {
    fs::read(path).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })
}

fn is_png(bytes: &[u8]) -> bool {
    bytes.starts_with(b"\x89PNG\r\n\x1a\n")
}

pub fn heatmap_from_npy(arr: NpyArray) -> Result<Heatmap, LoadError> {
    match arr.shape[..] {
        [h, w] => Ok(Heatmap::new(h, w, arr.data)?),
        _ => Err(LoadError::RankMismatch { expected: "2", found: arr.rank(), shape: arr.shape }),
    }
}

pub fn mask_from_npy(arr: NpyArray) -> Result<BinaryMask, LoadError> {
    match arr.shape[..] {
        [h, w] => Ok(BinaryMask::from_threshold(h, w, &arr.data)?),
        _ => Err(LoadError::RankMismatch { expected: "2", found: arr.rank(), shape: arr.shape }),
    }
}

/// Rank-2 arrays load as single-channel; rank-3 arrays are (C, H, W).
pub fn image_from_npy(arr: NpyArray) -> Result<ImageTensor, LoadError> {
    match arr.shape[..] {
        [h, w] => Ok(ImageTensor::new(1, h, w, arr.data)?),
        [c, h, w] => Ok(ImageTensor::new(c, h, w, arr.data)?),
        _ => Err(LoadError::RankMismatch { expected: "2 or 3", found: arr.rank(), shape: arr.shape }),
    }
}

/// Decodes an 8-bit single-channel PNG into `(height, width, pixels)`.
pub fn decode_greyscale_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), LoadError> {
    let err = |e: png::DecodingError| LoadError::Png(e.to_string());
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let info = decoder.read_header_info().map_err(err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    if (width as u64) * (height as u64) > (1 << 28) {
        return Err(LoadError::Png(format!("image {width}x{height} too large")));
    }
    let mut reader = decoder.read_info().map_err(err)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(LoadError::Png(format!(
            "expected 8-bit greyscale, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let size = reader.output_buffer_size().ok_or_else(|| LoadError::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(err)?;
    let stride = frame.line_size;
    let mut pixels = Vec::with_capacity(width * height);
    for row in 0..height {
        pixels.extend_from_slice(&buf[row * stride..row * stride + width]);
    }
    Ok((height, width, pixels))
}

pub fn encode_greyscale_png(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), height * width);
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("png header into memory");
        writer.write_image_data(pixels).expect("png data into memory");
    }
    out
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<BinaryMask, LoadError> {
    if is_png(bytes) {
        let (h, w, pixels) = decode_greyscale_png(bytes)?;
        Ok(BinaryMask::new(h, w, pixels.iter().map(|&p| p != 0).collect())?)
    } else {
        mask_from_npy(npy::parse(bytes)?)
    }
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<ImageTensor, LoadError> {
    if is_png(bytes) {
        let (h, w, pixels) = decode_greyscale_png(bytes)?;
        Ok(ImageTensor::from_greyscale_u8(h, w, &pixels)?)
    } else {
        image_from_npy(npy::parse(bytes)?)
    }
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Heatmap, LoadError> {
    heatmap_from_npy(npy::parse(&read_bytes(path.as_ref())?)?)
}

/// Loads a mask from npy or 8-bit PNG; any nonzero value is inside.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask, LoadError> {
    mask_from_bytes(&read_bytes(path.as_ref())?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor, LoadError> {
    image_from_bytes(&read_bytes(path.as_ref())?)
}

fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)
}

pub fn write_heatmap(path: impl AsRef<Path>, map: &Heatmap, dtype: Dtype) -> std::io::Result<()> {
    write_file(path.as_ref(), &npy::encode(&[map.height(), map.width()], map.values(), dtype))
}

pub fn write_image(path: impl AsRef<Path>, image: &ImageTensor) -> std::io::Result<()> {
    let (c, h, w) = image.shape();
    write_file(path.as_ref(), &npy::encode(&[c, h, w], image.values(), Dtype::F8))
}

/// Writes a mask as an 8-bit PNG with values {0, 255}.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> std::io::Result<()> {
    let pixels: Vec<u8> = mask.values().iter().map(|&v| if v { 255 } else { 0 }).collect();
    write_file(path.as_ref(), &encode_greyscale_png(mask.height(), mask.width(), &pixels))
}

pub fn write_mask_npy(path: impl AsRef<Path>, mask: &BinaryMask) -> std::io::Result<()> {
    write_file(path.as_ref(), &npy::encode(&[mask.height(), mask.width()], mask.to_heatmap().values(), Dtype::U1))
}

/// One dataset entry. Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_id: String,
    pub image_path: String,
    /// `None` when no annotation exists for the image.
    pub mask_path: Option<String>,
    pub label: usize,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    /// Parses the JSON array form. Relative paths resolve against `root`.
    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self, LoadError> {
        let records: Vec<ManifestRecord> =
            serde_json::from_str(text).map_err(|e| LoadError::Manifest(e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if r.image_id.is_empty() {
                return Err(LoadError::Manifest("empty image_id".into()));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(LoadError::Manifest(format!("duplicate image_id {:?}", r.image_id)));
            }
        }
        Ok(Self { records, root: root.into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        let path = path.as_ref();
        let bytes = read_bytes(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| LoadError::Manifest(e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(text, root)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("manifest serializes")
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| split == "all" || r.split == split)
    }
}
