//! IDX container: big-endian magic, big-endian u32 extents, row-major u8 payload.
//! Files ending in `.gz` are transparently decompressed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::LabeledDataset;
use crate::error::{Error, IdxErrorKind, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(offset: u64, kind: IdxErrorKind) -> Error {
    Error::Idx { offset, kind }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or_else(|| {
        idx_err(
            offset as u64,
            IdxErrorKind::Truncated {
                needed: 4,
                available: bytes.len().saturating_sub(offset) as u64,
            },
        )
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(idx_err(0, IdxErrorKind::BadMagic { expected, found }));
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| {
        idx_err(
            start as u64,
            IdxErrorKind::Truncated {
                needed: len as u64,
                available: bytes.len().saturating_sub(start) as u64,
            },
        )
    })
}

/// Parses an image file into `[N, 1, rows, cols]` scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let px = payload(bytes, 16, n * rows * cols)?;
    let data = px.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new([n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.to_vec())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Loads a 10-class image/label pair; transforms are recorded as none.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path.as_ref())?)?;
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(idx_err(
            4,
            IdxErrorKind::CountMismatch {
                images: n as u32,
                labels: labels.len() as u32,
            },
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(idx_err(8 + pos as u64, IdxErrorKind::LabelOutOfRange(labels[pos])));
    }
    LabeledDataset::new(images, labels.into_iter().map(usize::from).collect(), 10)
}

/// Encodes `[N, 1, H, W]` images, rounding `v * 255` to the nearest byte.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = images.dims4("encode_idx_images")?;
    if c != 1 {
        return Err(Error::shape("encode_idx_images", "channels", format!("expected 1, got {c}")));
    }
    let mut out = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

pub fn write_mnist_idx(
    ds: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    write_maybe_gz(images_path.as_ref(), &encode_idx_images(&ds.images)?)?;
    write_maybe_gz(labels_path.as_ref(), &encode_idx_labels(&ds.labels))
}

/// The four standard MNIST files inside a data directory, plain or gzipped.
#[derive(Clone, Debug)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn locate(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let find = |stem: &str| -> Result<PathBuf> {
            for name in [stem.to_string(), format!("{stem}.gz")] {
                let p = dir.join(&name);
                if p.is_file() {
                    return Ok(p);
                }
            }
            Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{stem}[.gz] not found in {}", dir.display()),
            )))
        };
        Ok(MnistFiles {
            train_images: find("train-images-idx3-ubyte")?,
            train_labels: find("train-labels-idx1-ubyte")?,
            test_images: find("t10k-images-idx3-ubyte")?,
            test_labels: find("t10k-labels-idx1-ubyte")?,
        })
    }

    pub fn load_train(&self) -> Result<LabeledDataset> {
        load_mnist_idx(&self.train_images, &self.train_labels)
    }

    pub fn load_test(&self) -> Result<LabeledDataset> {
        load_mnist_idx(&self.test_images, &self.test_labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_file(count: u32, bytes: &[u8]) -> Vec<u8> {
        let mut v = LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&count.to_be_bytes());
        v.extend_from_slice(bytes);
        v
    }

    #[test]
    fn labels_example() {
        assert_eq!(parse_idx_labels(&labels_file(2, &[7, 3])).unwrap(), vec![7, 3]);
    }

    #[test]
    fn images_example() {
        let mut v = IMAGES_MAGIC.to_be_bytes().to_vec();
        for x in [1u32, 2, 2] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(&[0, 255, 128, 64]);
        let t = parse_idx_images(&v).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] - 0.501_960_784).abs() < 1e-9);
        assert!((t.data()[3] - 0.250_980_392).abs() < 1e-9);
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let mut f = labels_file(1, &[1]);
        f[3] = 0x03;
        match parse_idx_labels(&f) {
            Err(Error::Idx { offset: 0, kind: IdxErrorKind::BadMagic { found, .. } }) => {
                assert_eq!(found, 0x803)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_payload_start() {
        match parse_idx_labels(&labels_file(5, &[1, 2])) {
            Err(Error::Idx {
                offset: 8,
                kind: IdxErrorKind::Truncated { needed: 5, available: 2 },
            }) => {}
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&IMAGES_MAGIC.to_be_bytes()) {
            Err(Error::Idx { offset: 4, kind: IdxErrorKind::Truncated { .. } }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        let images = Tensor::zeros([2, 1, 2, 2]);
        fs::write(&ip, encode_idx_images(&images).unwrap()).unwrap();
        fs::write(&lp, labels_file(3, &[1, 2, 3])).unwrap();
        match load_mnist_idx(&ip, &lp) {
            Err(Error::Idx { kind: IdxErrorKind::CountMismatch { images: 2, labels: 3 }, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
