//! MNIST (IDX) and CIFAR-10 (binary version) loaders, a synthetic two-class
//! fixture, and seeded mini-batch iteration.
//!
//! Pixels are scaled by `1/255` into `[0, 1]` with no centering, so attack
//! budgets are expressed directly in pixel units.

use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// IDX magic for a 4-d array of big-endian `f64` (type code 0x0E).
pub const IDX_F64_4D_MAGIC: u32 = 0x0000_0E04;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

pub fn normalize_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

pub fn denormalize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    name: String,
    image_shape: Vec<usize>,
    classes: usize,
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(
        name: impl Into<String>,
        image_shape: Vec<usize>,
        classes: usize,
        images: Vec<Tensor>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!("{} images but {} labels", images.len(), labels.len())));
        }
        for (i, (img, &label)) in images.iter().zip(&labels).enumerate() {
            if img.shape() != image_shape.as_slice() {
                return Err(Error::dim("LabeledImageSet", format!("image {i} has shape {:?}", img.shape())));
            }
            if label >= classes {
                return Err(Error::Config(format!("label {label} of item {i} exceeds {classes} classes")));
            }
            if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Contract {
                    op: "LabeledImageSet",
                    detail: format!("image {i} has pixel {v} outside [0, 1]"),
                });
            }
        }
        Ok(Self { name: name.into(), image_shape, classes, images, labels })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> (&Tensor, usize) {
        (&self.images[i], self.labels[i])
    }

    /// The first `n` items (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            name: self.name.clone(),
            image_shape: self.image_shape.clone(),
            classes: self.classes,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Same labels and metadata with the images replaced.
    pub fn with_images(&self, name: impl Into<String>, images: Vec<Tensor>) -> Result<Self> {
        Self::new(name, self.image_shape.clone(), self.classes, images, self.labels.clone())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_idx_labels(bytes: &[u8], source: &str) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes, source);
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.error(format!("bad label magic 0x{magic:08X} (expected 0x{IDX_LABELS_MAGIC:08X})")));
    }
    let n = r.u32_be("item count")? as usize;
    let labels = r.take(n, "labels")?.to_vec();
    r.expect_end()?;
    Ok(labels)
}

fn parse_idx_images(bytes: &[u8], source: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader::new(bytes, source);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.error(format!("bad image magic 0x{magic:08X} (expected 0x{IDX_IMAGES_MAGIC:08X})")));
    }
    let n = r.u32_be("item count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(r.error(format!("degenerate image extent {rows}x{cols}")));
    }
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| r.error("pixel count overflows"))?;
    let pixels = r.take(total, "pixels")?.to_vec();
    r.expect_end()?;
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX image/label pair that is already in memory.
pub fn parse_mnist_idx(image_bytes: &[u8], label_bytes: &[u8], source: &str) -> Result<LabeledImageSet> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes, &format!("{source} (images)"))?;
    let labels = parse_idx_labels(label_bytes, &format!("{source} (labels)"))?;
    if labels.len() != n {
        return Err(Error::parse(source, format!("{n} images but {} labels", labels.len())));
    }
    if (rows, cols) != (28, 28) {
        return Err(Error::parse(source, format!("MNIST images must be 28x28, got {rows}x{cols}")));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(Error::parse(source, format!("label {l} at item {i} is not a digit")));
    }
    let plane = rows * cols;
    let images = pixels
        .chunks_exact(plane)
        .map(|px| Tensor::from_parts(vec![1, rows, cols], px.iter().map(|&b| normalize_byte(b)).collect()))
        .collect();
    LabeledImageSet::new("mnist", vec![1, rows, cols], 10, images, labels.iter().map(|&l| l as usize).collect())
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(ip)?;
    let labels = read_file(lp)?;
    parse_mnist_idx(&images, &labels, &ip.display().to_string())
}

/// Appends the records of one CIFAR-10 binary batch.
pub fn parse_cifar10_records(
    bytes: &[u8],
    source: &str,
    images: &mut Vec<Tensor>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    if bytes.is_empty() {
        return Err(Error::parse(source, "empty file"));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let start = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(Error::parse(
            source,
            format!(
                "truncated record at byte offset {start}: {} of {CIFAR_RECORD_BYTES} bytes present",
                bytes.len() - start
            ),
        ));
    }
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::parse(
                source,
                format!("record {i} (byte offset {}) has label {label}", i * CIFAR_RECORD_BYTES),
            ));
        }
        labels.push(label);
        images.push(Tensor::from_parts(vec![3, 32, 32], rec[1..].iter().map(|&b| normalize_byte(b)).collect()));
    }
    Ok(())
}

pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImageSet> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR-10 batch files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = read_file(p)?;
        parse_cifar10_records(&bytes, &p.display().to_string(), &mut images, &mut labels)?;
    }
    LabeledImageSet::new("cifar10", vec![3, 32, 32], 10, images, labels)
}

/// Two classes centred at `∓separation/2` on the first axis with unit
/// Gaussian noise on every axis, mapped affinely into `[0, 1]` and clamped.
pub fn synthetic_gaussians(rng: &mut Rng, per_class: usize, dims: usize, separation: f64) -> Result<LabeledImageSet> {
    if per_class == 0 {
        return Err(Error::EmptyDataset { op: "synthetic_gaussians" });
    }
    if dims == 0 {
        return Err(Error::Config("synthetic_gaussians needs at least one dimension".into()));
    }
    let scale = 1.0 / (separation.abs() + 8.0);
    let mut images = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for class in 0..2 {
        let centre = if class == 0 { -separation / 2.0 } else { separation / 2.0 };
        for _ in 0..per_class {
            let data = (0..dims)
                .map(|d| {
                    let v = rng.standard_normal() + if d == 0 { centre } else { 0.0 };
                    (0.5 + v * scale).clamp(0.0, 1.0)
                })
                .collect();
            images.push(Tensor::from_parts(vec![dims], data));
            labels.push(class);
        }
    }
    LabeledImageSet::new("gaussians", vec![dims], 2, images, labels)
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    order
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub images: Vec<&'a Tensor>,
    pub labels: Vec<usize>,
}

pub struct Batches<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: indices.iter().map(|&i| &self.set.images[i]).collect(),
            labels: indices.iter().map(|&i| self.set.labels[i]).collect(),
            indices,
        })
    }
}

/// Mini-batches over a seeded permutation; the last partial batch is kept.
pub fn batches(set: &LabeledImageSet, size: usize, shuffle_seed: u64) -> Result<Batches<'_>> {
    if size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(Batches { set, order: permutation(set.len(), shuffle_seed), size, pos: 0 })
}

/// Writes images as an IDX `f64` array (`N×C×H×W`) and labels as IDX `u8`.
pub fn write_idx_dump(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    if set.image_shape.len() != 3 {
        return Err(Error::dim("write_idx_dump", format!("need C×H×W images, got {:?}", set.image_shape)));
    }
    if set.classes > 256 {
        return Err(Error::Config("IDX label dumps hold at most 256 classes".into()));
    }
    let mut img = Vec::with_capacity(20 + set.len() * set.images.first().map_or(0, Tensor::len) * 8);
    img.extend_from_slice(&IDX_F64_4D_MAGIC.to_be_bytes());
    for d in std::iter::once(set.len()).chain(set.image_shape.iter().copied()) {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for t in &set.images {
        for v in t.data() {
            img.extend_from_slice(&v.to_be_bytes());
        }
    }
    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lab.extend(set.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Reads back a dump written by [`write_idx_dump`].
pub fn read_idx_dump(images_path: &Path, labels_path: &Path, classes: usize, name: &str) -> Result<LabeledImageSet> {
    let bytes = read_file(images_path)?;
    let source = images_path.display().to_string();
    let mut r = Reader::new(&bytes, &source);
    let magic = r.u32_be("magic")?;
    if magic != IDX_F64_4D_MAGIC {
        return Err(r.error(format!("bad dump magic 0x{magic:08X}")));
    }
    let n = r.u32_be("item count")? as usize;
    let shape: Vec<usize> = (0..3).map(|_| r.u32_be("extent").map(|v| v as usize)).collect::<Result<_>>()?;
    let per: usize = shape.iter().product();
    if per == 0 || r.remaining() != n.saturating_mul(per).saturating_mul(8) {
        return Err(r.error(format!("payload of {} bytes does not hold {n} images of {shape:?}", r.remaining())));
    }
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = r.take(per * 8, "pixels")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect();
        images.push(Tensor::new(shape.clone(), data).map_err(|e| r.error(e.to_string()))?);
    }
    let lbytes = read_file(labels_path)?;
    let labels = parse_idx_labels(&lbytes, &labels_path.display().to_string())?;
    if labels.len() != n {
        return Err(Error::parse(source, format!("{n} images but {} labels", labels.len())));
    }
    LabeledImageSet::new(name, shape, classes, images, labels.into_iter().map(usize::from).collect())
}

/// Canonical file locations below a data root.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub root: PathBuf,
}

impl DataPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `<root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte`
    pub fn mnist(&self, train: bool) -> (PathBuf, PathBuf) {
        let prefix = if train { "train" } else { "t10k" };
        let dir = self.root.join("mnist");
        (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
    }

    /// `<root>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin`
    pub fn cifar10(&self, train: bool) -> Vec<PathBuf> {
        let dir = self.root.join("cifar-10-batches-bin");
        if train {
            (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
        } else {
            vec![dir.join("test_batch.bin")]
        }
    }

    pub fn load(&self, dataset: DatasetKind, train: bool) -> Result<LabeledImageSet> {
        match dataset {
            DatasetKind::Mnist => {
                let (i, l) = self.mnist(train);
                load_mnist_idx(i, l)
            }
            DatasetKind::Cifar10 => load_cifar10_binary(&self.cifar10(train)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => crate::network::MNIST_SHAPE,
            DatasetKind::Cifar10 => crate::network::CIFAR10_SHAPE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Usage(format!("unknown dataset {other:?} (expected mnist or cifar10)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(n: u32, rows: u32, cols: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..(n * rows * cols) as usize).map(fill));
        b
    }

    pub(crate) fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn mnist_normalization_endpoints() {
        let imgs = idx_images(2, 28, 28, |i| if i < 784 { 0 } else { 255 });
        let set = parse_mnist_idx(&imgs, &idx_labels(&[3, 7]), "mem").unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.image_shape(), &[1, 28, 28]);
        assert!(set.images()[0].data().iter().all(|&v| v == 0.0));
        assert!(set.images()[1].data().iter().all(|&v| v == 1.0));
        assert_eq!(set.labels(), &[3, 7]);
    }

    #[test]
    fn labels_with_image_magic_name_the_magic() {
        let imgs = idx_images(1, 28, 28, |_| 0);
        let mut bad = idx_labels(&[1]);
        bad[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        let err = parse_mnist_idx(&imgs, &bad, "mem").unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");
    }

    #[test]
    fn mnist_count_mismatch_and_truncation() {
        let imgs = idx_images(2, 28, 28, |_| 0);
        assert!(parse_mnist_idx(&imgs, &idx_labels(&[1]), "mem").is_err());
        assert!(parse_mnist_idx(&imgs[..imgs.len() - 1], &idx_labels(&[1, 2]), "mem").is_err());
        assert!(parse_mnist_idx(&imgs, &idx_labels(&[1, 12]), "mem").is_err());
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[0] = 9;
        bytes[1] = 255;
        bytes[CIFAR_RECORD_BYTES] = 2;
        let (mut imgs, mut labels) = (Vec::new(), Vec::new());
        parse_cifar10_records(&bytes, "mem", &mut imgs, &mut labels).unwrap();
        assert_eq!(labels, [9, 2]);
        assert_eq!(imgs[0].shape(), &[3, 32, 32]);
        assert_eq!(imgs[0].data()[0], 1.0);

        let err = parse_cifar10_records(&bytes[..CIFAR_RECORD_BYTES + 10], "mem", &mut imgs, &mut labels)
            .unwrap_err()
            .to_string();
        assert!(err.contains("byte offset 3073"), "{err}");
    }

    #[test]
    fn synthetic_is_seeded_and_valid() {
        let a = synthetic_gaussians(&mut Rng::new(1), 50, 4, 6.0).unwrap();
        let b = synthetic_gaussians(&mut Rng::new(1), 50, 4, 6.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(matches!(
            synthetic_gaussians(&mut Rng::new(1), 0, 4, 6.0),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn batches_cover_the_set() {
        let set = synthetic_gaussians(&mut Rng::new(2), 10, 2, 4.0).unwrap();
        let all: Vec<Batch> = batches(&set, 6, 9).unwrap().collect();
        assert_eq!(all.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), [6, 6, 6, 2]);
        let mut seen: Vec<usize> = all.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        let again: Vec<Vec<usize>> = batches(&set, 6, 9).unwrap().map(|b| b.indices).collect();
        assert_eq!(again, all.iter().map(|b| b.indices.clone()).collect::<Vec<_>>());
        assert_eq!(batches(&set, 100, 9).unwrap().count(), 1);
        assert!(batches(&set, 0, 9).is_err());
    }

    #[test]
    fn byte_normalization_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(denormalize(normalize_byte(b)), b);
            assert_eq!(normalize_byte(denormalize(normalize_byte(b))), normalize_byte(b));
        }
    }

    #[test]
    fn idx_dump_round_trip() {
        let imgs = idx_images(3, 28, 28, |i| (i % 251) as u8);
        let set = parse_mnist_idx(&imgs, &idx_labels(&[0, 5, 9]), "mem").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("x.idx"), dir.path().join("y.idx"));
        write_idx_dump(&set, &ip, &lp).unwrap();
        let back = read_idx_dump(&ip, &lp, 10, "mnist").unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn set_rejects_out_of_range_pixels() {
        let img = Tensor::new(vec![2], vec![0.5, 1.5]).unwrap();
        assert!(LabeledImageSet::new("x", vec![2], 2, vec![img], vec![0]).is_err());
    }
}
