//! Labeled image sets and the IDX and CIFAR binary containers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{channel_stats, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images `[N, C, H, W]` in `[0, 1]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Pairing {
                images: n,
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.gather_batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (mean, var) = channel_stats(&self.images);
        (mean, var.into_iter().map(f64::sqrt).collect())
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset,
            msg: "truncated header".into(),
        })
}

/// Parses an IDX image file into `[N, 1, H, W]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            msg: format!("magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let need = n * h * w;
    if body.len() < need {
        return Err(Error::Format {
            offset: 16 + body.len(),
            msg: format!(
                "{n} images of {h}x{w} need {need} pixel bytes, found {}",
                body.len()
            ),
        });
    }
    let data = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            msg: format!("magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format {
            offset: 8 + body.len(),
            msg: format!("{n} labels declared, {} present", body.len()),
        });
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&fs::read(images)?)?;
    let y = parse_idx_labels(&fs::read(labels)?)?;
    Dataset::new(x, y)
}

/// Loads the train and test splits of an IDX directory laid out with the
/// usual MNIST file names.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = images.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!(
            "IDX images hold one channel, got {c}"
        )));
    }
    let mut out = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Parses CIFAR-10 binary records: one label byte, then 3x32x32
/// channel-major pixels.
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            msg: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels)
}

pub fn load_cifar_bin(path: &Path) -> Result<Dataset> {
    parse_cifar_bin(&fs::read(path)?)
}

pub fn encode_cifar_bin(set: &Dataset) -> Result<Vec<u8>> {
    let (_, c, h, w) = set.images.dims4()?;
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::Shape(format!(
            "CIFAR records are 3x32x32, got {c}x{h}x{w}"
        )));
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for (i, &label) in set.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            set.images.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| to_byte(v)),
        );
    }
    Ok(out)
}

pub fn write_cifar_bin(set: &Dataset, path: &Path) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_cifar_bin(set)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let x = Tensor::new(
            vec![4, 1, 2, 3],
            (0..24).map(|v| v as f64 / 255.0).collect(),
        )
        .unwrap();
        let parsed = parse_idx_images(&encode_idx_images(&x).unwrap()).unwrap();
        assert_eq!(parsed.shape(), &[4, 1, 2, 3]);
        assert!(parsed.max_abs_diff(&x) < 1e-15);
        assert_eq!(
            parse_idx_labels(&encode_idx_labels(&[1, 2, 3, 4]))
                .unwrap()
                .len(),
            4
        );
    }

    #[test]
    fn idx_errors() {
        let mut bytes = encode_idx_labels(&[1, 2]);
        bytes[3] = 0x03;
        assert!(matches!(
            parse_idx_labels(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let x = Tensor::zeros(&[2, 1, 2, 2]);
        let bytes = encode_idx_images(&x).unwrap();
        assert!(matches!(
            parse_idx_images(&bytes[..20]),
            Err(Error::Format { offset: 20, .. })
        ));
        assert!(matches!(
            Dataset::new(x, vec![0]),
            Err(Error::Pairing {
                images: 2,
                labels: 1
            })
        ));
    }

    #[test]
    fn cifar_layout() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 9;
        bytes[CIFAR_RECORD + 1] = 255;
        let set = parse_cifar_bin(&bytes).unwrap();
        assert_eq!(set.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(set.labels, vec![0, 9]);
        assert_eq!(set.images.data()[3072], 1.0);
        assert!(parse_cifar_bin(&bytes[1..]).is_err());
    }
}
