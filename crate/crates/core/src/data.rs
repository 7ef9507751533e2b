//! MNIST-style IDX ingestion and the prepared 8×8 feature cache.
//!
//! IDX files are big-endian: a 32-bit magic (`0x00000803` for images,
//! `0x00000801` for labels), one 32-bit size per dimension, then raw bytes.
//! Gzip-compressed files are detected by their magic and decompressed.
//!
//! The cache is a single little-endian file:
//!
//! ```text
//! "QCNNPREP"  u32 format_version  u32 preprocess_version  u8 split
//! u64 count   [32] image_sha256   [32] label_sha256
//! count × 64 × f64 features       count × u8 labels
//! [32] sha256 of everything above
//! ```

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use flate2::read::MultiGzDecoder;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::encoding::{self, Image8, PIXELS, SOURCE_SIDE};
use crate::error::{Error, Result};
use crate::CLASS_COUNT;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

const CACHE_MAGIC: &[u8; 8] = b"QCNNPREP";
pub const CACHE_FORMAT_VERSION: u32 = 1;
/// Bumped whenever `prepare` would produce different features.
pub const PREPROCESS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// File-name prefix used by the MNIST distribution.
    pub fn idx_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }
}

fn read_source(path: &Path) -> Result<(Vec<u8>, [u8; 32])> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes).into();
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok((out, digest))
    } else {
        Ok((bytes, digest))
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile { path: path.into() })
}

fn check_payload(bytes: &[u8], header: usize, expected: usize, path: &Path) -> Result<()> {
    let payload = bytes.len() - header;
    if payload < expected {
        return Err(Error::TruncatedFile { path: path.into() });
    }
    if payload > expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} payload bytes, header promises {expected}",
            path.display(),
            payload
        )));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    check_payload(bytes, 16, count * rows * cols, path)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    check_payload(bytes, 8, count, path)?;
    Ok(bytes[8..].to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    parse_idx_images(&read_source(path)?.0, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&read_source(path)?.0, path)
}

/// Locates `<prefix>-images-idx3-ubyte[.gz]` and the matching labels in `dir`.
/// Missing files are reported with the uncompressed name.
pub fn idx_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let find = |stem: String| {
        let plain = dir.join(&stem);
        let gz = dir.join(format!("{stem}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    };
    (
        find(format!("{}-images-idx3-ubyte", split.idx_prefix())),
        find(format!("{}-labels-idx1-ubyte", split.idx_prefix())),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub image_sha256: [u8; 32],
    pub label_sha256: [u8; 32],
    pub preprocess_version: u32,
}

/// Raw 28×28 byte images with labels.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub images: IdxImages,
    pub labels: Vec<u8>,
    pub split: Split,
    pub image_sha256: [u8; 32],
    pub label_sha256: [u8; 32],
}

impl RawDataset {
    pub fn new(images: IdxImages, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        if (images.rows, images.cols) != (SOURCE_SIDE, SOURCE_SIDE) {
            return Err(Error::DimensionMismatch(format!(
                "images are {}x{}, expected 28x28",
                images.rows, images.cols
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::BadLabel(bad as usize));
        }
        Ok(Self {
            images,
            labels,
            split,
            image_sha256: [0; 32],
            label_sha256: [0; 32],
        })
    }

    pub fn load(images_path: &Path, labels_path: &Path, split: Split) -> Result<Self> {
        let (image_bytes, image_sha256) = read_source(images_path)?;
        let (label_bytes, label_sha256) = read_source(labels_path)?;
        let images = parse_idx_images(&image_bytes, images_path)?;
        let labels = parse_idx_labels(&label_bytes, labels_path)?;
        let mut raw = Self::new(images, labels, split)?;
        raw.image_sha256 = image_sha256;
        raw.label_sha256 = label_sha256;
        Ok(raw)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Downsampled `[0, 1]` features (not yet L2-normalized) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    features: Vec<f64>,
    labels: Vec<u8>,
    split: Split,
    provenance: Provenance,
}

/// `bytes / 255`, then bilinear 28×28 → 8×8, per image.
pub fn prepare(raw: &RawDataset) -> Result<PreparedDataset> {
    let mut features = Vec::with_capacity(raw.len() * PIXELS);
    let mut scaled = vec![0.0; SOURCE_SIDE * SOURCE_SIDE];
    for i in 0..raw.len() {
        for (dst, &b) in scaled.iter_mut().zip(raw.images.image(i)) {
            *dst = b as f64 / 255.0;
        }
        features.extend_from_slice(encoding::downsample_bilinear(&scaled)?.pixels());
    }
    Ok(PreparedDataset {
        features,
        labels: raw.labels.clone(),
        split: raw.split,
        provenance: Provenance {
            image_sha256: raw.image_sha256,
            label_sha256: raw.label_sha256,
            preprocess_version: PREPROCESS_VERSION,
        },
    })
}

impl PreparedDataset {
    /// Builds a dataset from 64-wide feature rows, e.g. for synthetic tests.
    pub fn from_parts(features: Vec<f64>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if features.len() != labels.len() * PIXELS {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::BadLabel(bad as usize));
        }
        Ok(Self {
            features,
            labels,
            split,
            provenance: Provenance {
                image_sha256: [0; 32],
                label_sha256: [0; 32],
                preprocess_version: PREPROCESS_VERSION,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn image(&self, i: usize) -> Result<Image8> {
        Image8::from_slice(self.features(i))
    }

    /// Copies the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            labels,
            split: self.split,
            provenance: self.provenance,
        }
    }

    /// `count` rows chosen uniformly without replacement by `seed`, or
    /// everything when `count` covers the dataset.
    pub fn random_subset(&self, count: usize, seed: u64) -> Self {
        if count >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut crate::rng::stream(seed, &[0x5ab5e7]));
        idx.truncate(count);
        self.subset(&idx)
    }

    /// Examples per class.
    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0; CLASS_COUNT];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96 + self.features.len() * 8 + self.labels.len() + 32);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.provenance.preprocess_version.to_le_bytes());
        out.push(match self.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        out.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.provenance.image_sha256);
        out.extend_from_slice(&self.provenance.label_sha256);
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_cache_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::CacheFormat {
            path: path.into(),
            message: message.into(),
        };
        const HEADER: usize = 8 + 4 + 4 + 1 + 8 + 32 + 32;
        if bytes.len() < HEADER + 32 || &bytes[..8] != CACHE_MAGIC {
            return Err(bad("not a prepared-dataset cache"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(body[at..at + 4].try_into().unwrap());
        if u32_at(8) != CACHE_FORMAT_VERSION {
            return Err(bad("unsupported cache format version"));
        }
        let preprocess_version = u32_at(12);
        let split = match body[16] {
            0 => Split::Train,
            1 => Split::Test,
            _ => return Err(bad("bad split tag")),
        };
        let count = u64::from_le_bytes(body[17..25].try_into().unwrap()) as usize;
        let image_sha256: [u8; 32] = body[25..57].try_into().unwrap();
        let label_sha256: [u8; 32] = body[57..89].try_into().unwrap();
        if body.len() != HEADER + count * PIXELS * 8 + count {
            return Err(bad("length does not match the recorded count"));
        }
        let feature_end = HEADER + count * PIXELS * 8;
        let features = body[HEADER..feature_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = body[feature_end..].to_vec();
        if labels.iter().any(|&l| l as usize >= CLASS_COUNT) {
            return Err(bad("label out of range"));
        }
        Ok(Self {
            features,
            labels,
            split,
            provenance: Provenance {
                image_sha256,
                label_sha256,
                preprocess_version,
            },
        })
    }

    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(format!(".{}-{}.tmp", std::process::id(), NEXT.fetch_add(1, Ordering::Relaxed)));
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, self.to_cache_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cache_bytes(&bytes, path)
    }
}

/// Reads `cache` if it was produced from exactly these source files by the
/// current preprocessing; otherwise prepares from the IDX files and rewrites it.
pub fn load_or_prepare(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
    cache: &Path,
) -> Result<PreparedDataset> {
    let image_sha: [u8; 32] = Sha256::digest(fs::read(images_path).map_err(|e| Error::io(images_path, e))?).into();
    let label_sha: [u8; 32] = Sha256::digest(fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?).into();
    if let Ok(cached) = PreparedDataset::read_cache(cache) {
        let p = cached.provenance;
        if p.image_sha256 == image_sha
            && p.label_sha256 == label_sha
            && p.preprocess_version == PREPROCESS_VERSION
            && cached.split == split
        {
            return Ok(cached);
        }
        log::info!("{}: stale cache, regenerating", cache.display());
    }
    let prepared = prepare(&RawDataset::load(images_path, labels_path, split)?)?;
    prepared.write_cache(cache)?;
    Ok(prepared)
}

pub fn hex_digest(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
