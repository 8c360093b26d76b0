//! MNIST (IDX) and CIFAR-10 (binary batch) loaders.
//!
//! Expected layouts, relative to the dataset directory:
//!
//! ```text
//! mnist/    train-images-idx3-ubyte  train-labels-idx1-ubyte
//!           t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte     (or *.gz)
//! cifar10/  data_batch_1.bin .. data_batch_5.bin  test_batch.bin
//! ```
//!
//! Pixels are scaled to `[0, 1]` and stored `[N, H, W, C]`.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// `[H, W, C]` of one image.
    pub fn image_dims(&self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [28, 28, 1],
            DatasetKind::Cifar10 => [32, 32, 3],
        }
    }

    /// The dataset whose images are `dims`.
    pub fn for_dims(dims: [usize; 3]) -> Result<Self> {
        [DatasetKind::Mnist, DatasetKind::Cifar10]
            .into_iter()
            .find(|k| k.image_dims() == dims)
            .ok_or_else(|| Error::shape(format!("no dataset has {dims:?} images")))
    }

    /// Loads `(train, test)` from `root/<name>` if that directory exists,
    /// otherwise from `root` itself.
    pub fn load(&self, root: &Path) -> Result<(Dataset, Dataset)> {
        let nested = root.join(self.name());
        let dir = if nested.is_dir() { nested } else { root.to_path_buf() };
        match self {
            DatasetKind::Mnist => load_mnist(&dir),
            DatasetKind::Cifar10 => load_cifar10(&dir),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar" => Ok(DatasetKind::Cifar10),
            _ => Err(Error::invalid(format!("unknown dataset {s:?}"))),
        }
    }
}

/// Images `[N, H, W, C]` in `[0, 1]` with labels in `0..10`.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.dims().len() != 4 {
            return Err(Error::shape(format!("dataset images must be [N, H, W, C], got {}", images.shape())));
        }
        if images.dims()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {} at index {bad} out of range", labels[bad])));
        }
        if let Some(bad) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "pixel {} at flat index {bad} outside [0, 1]",
                images.data()[bad]
            )));
        }
        Ok(Dataset { images, labels, split })
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

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    /// Copy of image `i` as `[H, W, C]`.
    pub fn image(&self, i: usize) -> Tensor {
        let dims = self.image_dims();
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, self.images.data()[i * n..(i + 1) * n].to_vec()).expect("consistent dims")
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let [h, w, c] = self.image_dims();
        let per = h * w * c;
        Dataset {
            images: Tensor::from_vec([n, h, w, c], self.images.data()[..n * per].to_vec()).expect("consistent dims"),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads `name`, or `name.gz` decompressed.
fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    if plain.is_file() {
        return read_file(&plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    let raw = read_file(&gz)?;
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::io(&gz, e))?;
    Ok(out)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("IDX", "truncated header"))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("IDX", format!("image magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(Error::format(
            "IDX",
            format!("header declares {n}x{rows}x{cols} = {expected} pixel bytes, file has {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("IDX", format!("label magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            "IDX",
            format!("header declares {n} labels, file has {}", body.len()),
        ));
    }
    Ok(body)
}

fn mnist_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let image_bytes = read_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let label_bytes = read_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::format("IDX", format!("{n} images but {} labels", labels.len())));
    }
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(Tensor::from_vec([n, rows, cols, 1], data)?, labels.to_vec(), split)
}

pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        mnist_split(dir, "train", Split::Train)?,
        mnist_split(dir, "t10k", Split::Test)?,
    ))
}

/// Parses CIFAR-10 binary records (label byte, then the R, G and B planes of
/// a 32x32 image) into labels and `[H, W, C]`-interleaved pixels in `[0, 1]`.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Vec<u8>, Vec<f64>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            "CIFAR-10",
            format!("{} bytes is not a positive multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let plane = 32 * 32;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if record[0] as usize >= NUM_CLASSES {
            return Err(Error::format("CIFAR-10", format!("label byte {} out of range", record[0])));
        }
        labels.push(record[0]);
        let planes = &record[1..];
        for px in 0..plane {
            for c in 0..3 {
                pixels.push(f64::from(planes[c * plane + px]) / 255.0);
            }
        }
    }
    Ok((labels, pixels))
}

fn cifar_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn cifar_split(dir: &Path, files: &[String], split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let (l, p) = parse_cifar_records(&read_file(&path)?).map_err(|e| match e {
            Error::Format { format, reason } => Error::format(format, format!("{}: {reason}", path.display())),
            other => other,
        })?;
        labels.extend(l);
        pixels.extend(p);
    }
    let n = labels.len();
    Dataset::new(Tensor::from_vec([n, 32, 32, 3], pixels)?, labels, split)
}

pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = cifar_dir(dir);
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok((
        cifar_split(&dir, &train_files, Split::Train)?,
        cifar_split(&dir, &["test_batch.bin".to_string()], Split::Test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_magic_bytes() {
        let bytes = idx_images(1, 2, 2, &[0, 255, 1, 2]);
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x03]);
        let (n, r, c, px) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, r, c), (1, 2, 2));
        assert_eq!(px, &[0, 255, 1, 2]);
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let mut bytes = idx_images(1, 2, 2, &[0, 255, 1, 2]);
        bytes[3] = 0x01;
        assert!(parse_idx_images(&bytes).is_err());
        let bytes = idx_images(2, 2, 2, &[0, 255, 1, 2]);
        assert!(parse_idx_images(&bytes).is_err());
        assert!(parse_idx_images(&[0, 0, 8]).is_err());
        let mut labels = idx_labels(&[1, 2, 3]);
        labels.pop();
        assert!(parse_idx_labels(&labels).is_err());
        assert!(parse_idx_labels(&idx_images(1, 1, 1, &[0])).is_err());
    }

    #[test]
    fn mnist_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        for prefix in ["train", "t10k"] {
            fs::write(dir.path().join(format!("{prefix}-images-idx3-ubyte")), idx_images(2, 1, 2, &[255, 0, 51, 102])).unwrap();
            fs::write(dir.path().join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&[7, 3])).unwrap();
        }
        let (train, test) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.split(), Split::Test);
        assert_eq!(train.image(0).data(), &[1.0, 0.0]);
        assert_eq!(train.image(1).data(), &[0.2, 0.4]);
        assert_eq!(train.labels(), &[7, 3]);
    }

    #[test]
    fn mnist_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for prefix in ["train", "t10k"] {
            fs::write(dir.path().join(format!("{prefix}-images-idx3-ubyte")), idx_images(2, 1, 1, &[1, 2])).unwrap();
            fs::write(dir.path().join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&[1])).unwrap();
        }
        assert!(load_mnist(dir.path()).is_err());
    }

    #[test]
    fn cifar_record_layout() {
        assert_eq!(CIFAR_RECORD_BYTES, 3073);
        let mut record = vec![0u8; CIFAR_RECORD_BYTES];
        record[0] = 4;
        record[1] = 255; // R of pixel (0, 0)
        record[1 + 1024 + 1] = 51; // G of pixel (0, 1)
        record[1 + 2048 + 32] = 102; // B of pixel (1, 0)
        let (labels, px) = parse_cifar_records(&record).unwrap();
        assert_eq!(labels, vec![4]);
        let img = Tensor::from_vec([32, 32, 3], px).unwrap();
        assert_eq!(img.get(&[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(img.get(&[0, 1, 1]).unwrap(), 0.2);
        assert_eq!(img.get(&[1, 0, 2]).unwrap(), 0.4);
        assert_eq!(img.data().iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn cifar_zero_record() {
        let (labels, px) = parse_cifar_records(&vec![0u8; CIFAR_RECORD_BYTES]).unwrap();
        assert_eq!(labels, vec![0]);
        assert!(px.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar_rejects_partial_records() {
        assert!(parse_cifar_records(&vec![0u8; CIFAR_RECORD_BYTES + 1]).is_err());
        assert!(parse_cifar_records(&[]).is_err());
        let mut bad = vec![0u8; CIFAR_RECORD_BYTES];
        bad[0] = 10;
        assert!(parse_cifar_records(&bad).is_err());
    }

    #[test]
    fn dataset_validation() {
        let images = Tensor::zeros([2, 1, 1, 1]).unwrap();
        assert!(Dataset::new(images.clone(), vec![0], Split::Train).is_err());
        assert!(Dataset::new(images.clone(), vec![0, 10], Split::Train).is_err());
        let bright = Tensor::full([2, 1, 1, 1], 1.5).unwrap();
        assert!(Dataset::new(bright, vec![0, 1], Split::Train).is_err());
        let ds = Dataset::new(images, vec![0, 9], Split::Train).unwrap();
        assert_eq!(ds.take(1).len(), 1);
    }

    #[test]
    fn dataset_kind_names() {
        assert_eq!("MNIST".parse::<DatasetKind>().unwrap(), DatasetKind::Mnist);
        assert_eq!("cifar-10".parse::<DatasetKind>().unwrap(), DatasetKind::Cifar10);
        assert!("svhn".parse::<DatasetKind>().is_err());
    }
}
